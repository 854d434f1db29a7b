"""Command-line driver: ``priot pretrain | calibrate | train | eval | report | reproduce``.

Settings come from three layers, later ones winning: built-in defaults, a
YAML file given with ``--config``, then flags given on the command line.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 checkpoint or training-invariant error.
"""
import logging
import sys
from dataclasses import asdict, dataclass, fields
from importlib import resources
from pathlib import Path

import click
import yaml

from . import report as R
from .dataio import (CheckpointError, DataError, load_checkpoint, load_source,
                     rotate_dataset, save_checkpoint, subsample)
from .network import IntegerNetwork
from .scaling import CalibrationError, FrozenScaleError, calibrate
from .train import (METHODS, SELECTIONS, ConfigError, InvariantError, ModeMismatchError,
                    TrainerConfig, estimate_footprint, evaluate_checkpoint, run_experiment)

log = logging.getLogger("priot")

EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 2, 3, 4


def fixture_checkpoint_path():
    return resources.files("priot") / "data" / "fixture.ckpt"


@dataclass
class ExperimentConfig:
    """Everything one training run needs, loadable from YAML."""
    checkpoint: str = None
    data: str = "bundled"
    angle: float = 30.0
    n_train: int = 1024
    n_test: int = 1024
    subset_seed: int = 0
    method: str = "priot"
    epochs: int = 30
    seed: int = 0
    shuffle_seed: int = 0
    threshold: int = None
    pruning_rate: float = 0.9
    selection: str = "random"
    rounding: str = "nearest"
    weight_lr_shift: int = TrainerConfig.weight_lr_shift
    score_lr_shift: int = TrainerConfig.score_lr_shift
    loss: str = TrainerConfig.loss
    softmax_bits: int = TrainerConfig.softmax_bits

    @classmethod
    def resolve(cls, config_file=None, **flags):
        values = {}
        if config_file:
            loaded = yaml.safe_load(Path(config_file).read_text()) or {}
            if not isinstance(loaded, dict):
                raise ConfigError(f"{config_file}: expected a mapping at top level")
            values.update({k.replace("-", "_"): v for k, v in loaded.items()})
        values.update({k: v for k, v in flags.items() if v is not None})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        cfg = cls(**values)
        cfg.trainer_config()  # validate before any work starts
        if cfg.n_train < 1 or cfg.n_test < 1:
            raise ConfigError("n_train and n_test must be positive")
        return cfg

    def trainer_config(self):
        names = {f.name for f in fields(TrainerConfig)}
        return TrainerConfig(**{k: v for k, v in asdict(self).items() if k in names})


def transfer_data(cfg):
    """Rotated training subset and test set for one run."""
    train = subsample(load_source(cfg.data, "train"), cfg.n_train, cfg.subset_seed)
    test = load_source(cfg.data, "test")
    if cfg.n_test != len(test):
        test = subsample(test, cfg.n_test, cfg.subset_seed)
    return rotate_dataset(train, cfg.angle), rotate_dataset(test, cfg.angle)


def train_one(cfg, out_dir, force=False, echo=None, ckpt=None, data=None):
    """Run one experiment and write metrics.csv, best.ckpt and summary files."""
    out_dir = Path(out_dir)
    targets = [out_dir / n for n in ("metrics.csv", "best.ckpt", "summary.json", "summary.txt")]
    if not force:
        existing = [str(t) for t in targets if t.exists()]
        if existing:
            raise FileExistsError(f"refusing to overwrite {existing[0]} without --force")
    ckpt = ckpt or load_checkpoint(cfg.checkpoint or fixture_checkpoint_path())
    train, test = data or transfer_data(cfg)

    def progress(m):
        if echo:
            echo(f"  epoch {m.epoch:2d}  train {100 * m.train_acc:6.2f}  "
                 f"test {100 * m.test_acc:6.2f}  overflow {100 * m.overflow_fraction:5.2f}%")

    result = run_experiment(cfg.trainer_config(), ckpt, train.to_int8(), train.labels,
                            test.to_int8(), test.labels, callback=progress)
    summary = R.run_summary(result, cfg.angle, ckpt.spec)
    summary["experiment"] = asdict(cfg)
    R.write_metrics_csv(result, out_dir / "metrics.csv", force=True)
    save_checkpoint(result.best_checkpoint, out_dir / "best.ckpt", force=True)
    R.write_summary(summary, out_dir, force=True)
    return result, summary


# --------------------------------------------------------------------------
# commands


def _data_option(f):
    return click.option("--data", default=None,
                        help='"bundled" (default) or a directory with the four MNIST IDX files.')(f)


def _check_data(data):
    if data not in (None, "bundled") and not Path(data).is_dir():
        raise click.BadParameter(f"{data} is not a directory", param_hint="--data")


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (repeat for debug).")
def cli(verbose):
    """Integer-only transfer learning by pruning (PRIOT, PRIOT-S) and NITI baselines."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@_data_option
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Checkpoint to write.")
@click.option("--epochs", default=5, show_default=True)
@click.option("--lr", default=0.01, show_default=True)
@click.option("--momentum", default=0.9, show_default=True)
@click.option("--batch-size", default=32, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--force", is_flag=True, help="Overwrite an existing file.")
def pretrain(data, out, epochs, lr, momentum, batch_size, seed, force):
    """Float pre-training on unrotated digits, then int8 weight quantization."""
    from .floatref import pretrain as float_pretrain, quantize_weights

    _check_data(data)
    if Path(out).exists() and not force:
        raise FileExistsError(f"refusing to overwrite {out} without --force")
    train, test = load_source(data, "train"), load_source(data, "test")
    model, acc = float_pretrain(_spec(), train, test, epochs=epochs, lr=lr, momentum=momentum,
                                batch_size=batch_size, seed=seed)
    ckpt = quantize_weights(model, metadata={"float_test_acc": round(acc, 6), "pretrain_seed": seed,
                                             "pretrain_epochs": epochs, "data": train.provenance})
    save_checkpoint(ckpt, out, force=force)
    click.echo(f"float test accuracy {100 * acc:.2f}%; wrote {out}")


def _spec():
    from .layers import tiny_cnn
    return tiny_cnn()


@cli.command(name="calibrate")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@_data_option
@click.option("--samples", default=256, show_default=True, help="Calibration passes.")
@click.option("--loss", type=click.Choice(["softmax", "linear"]), default=TrainerConfig.loss,
              show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), help="Defaults to CHECKPOINT itself.")
@click.option("--force", is_flag=True)
def calibrate_cmd(checkpoint, data, samples, loss, out, force):
    """Fix static scale factors to the most frequent dynamic shift per layer."""
    _check_data(data)
    out = out or checkpoint
    if Path(out).exists() and not force:
        raise FileExistsError(f"refusing to overwrite {out} without --force")
    if samples < 1:
        raise CalibrationError("calibration needs at least one sample")
    ckpt = load_checkpoint(checkpoint)
    calib = load_source(data, "train")
    net = IntegerNetwork(ckpt.spec, ckpt.weights, loss=loss)
    ckpt.scales = calibrate(net, calib.to_int8(), calib.labels, samples)
    ckpt.metadata = dict(ckpt.metadata, calibration_samples=samples, calibration_loss=loss)
    save_checkpoint(ckpt, out, force=True)
    click.echo(ckpt.scales.to_table(ckpt.spec.layer_names()))


def _train_options(f):
    opts = [
        click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
                     help="YAML file; flags override its values."),
        click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False),
                     help="Calibrated checkpoint (default: bundled fixture)."),
        _data_option,
        click.option("--angle", type=float), click.option("--n-train", type=int),
        click.option("--n-test", type=int), click.option("--subset-seed", type=int),
        click.option("--method", type=click.Choice(METHODS)),
        click.option("--epochs", type=int), click.option("--seed", type=int),
        click.option("--shuffle-seed", type=int),
        click.option("--threshold", type=int, help="Score threshold (default -64 PRIOT, 0 PRIOT-S)."),
        click.option("--pruning-rate", type=float, help="PRIOT-S share of unscored edges."),
        click.option("--selection", type=click.Choice(SELECTIONS)),
        click.option("--rounding", type=click.Choice(["nearest", "floor", "stochastic"])),
        click.option("--weight-lr-shift", type=int), click.option("--score-lr-shift", type=int),
        click.option("--loss", type=click.Choice(["softmax", "linear"])),
        click.option("--softmax-bits", type=int),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


@cli.command()
@_train_options
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Run directory.")
@click.option("--force", is_flag=True)
def train(config_file, out, force, **flags):
    """One transfer-learning run; writes metrics.csv, best.ckpt and summary files."""
    _check_data(flags.get("data"))
    cfg = ExperimentConfig.resolve(config_file, **flags)
    _, summary = train_one(cfg, out, force, echo=lambda s: click.echo(s, err=True))
    click.echo(R.summary_text(summary), nl=False)


@cli.command(name="eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@_data_option
@click.option("--angle", default=0.0, show_default=True)
@click.option("--n-test", default=1024, show_default=True)
@click.option("--subset-seed", default=0, show_default=True)
def eval_cmd(checkpoint, data, angle, n_test, subset_seed):
    """Test accuracy of a checkpoint on the rotated test split."""
    _check_data(data)
    ckpt = load_checkpoint(checkpoint)
    test = load_source(data, "test")
    if n_test != len(test):
        test = subsample(test, n_test, subset_seed)
    test = rotate_dataset(test, angle)
    acc = evaluate_checkpoint(ckpt, test.to_int8(), test.labels)
    kind = ckpt.score_kind or "no scores"
    click.echo(f"accuracy {100 * acc:.2f}% on {len(test)} images at {angle:g} deg ({kind})")


@cli.command(name="report")
@click.argument("paths", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(file_okay=False), help="Write table.txt and history.csv here.")
@click.option("--force", is_flag=True)
def report_cmd(paths, out, force):
    """Comparison table over run directories or summary.json files."""
    summaries = R.load_summaries(paths)
    if not summaries:
        raise click.UsageError("no summary.json found under the given paths")
    table = R.comparison_table(summaries)
    click.echo(table, nl=False)
    if out:
        from .dataio import atomic_write
        atomic_write(Path(out) / "table.txt", table.encode(), force=force)
        atomic_write(Path(out) / "history.csv", R.history_csv(summaries).encode(), force=force)


def _csv_list(kind):
    def convert(ctx, param, value):
        if value is None:
            return None
        try:
            return [kind(v) for v in value.split(",") if v.strip()]
        except ValueError as exc:
            raise click.BadParameter(str(exc))
    return convert


@cli.command()
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False),
              help="Calibrated checkpoint (default: bundled fixture).")
@click.option("--pretrain", "do_pretrain", is_flag=True,
              help="Pre-train and calibrate from scratch instead of using a checkpoint.")
@_data_option
@click.option("--angles", default="30,45", callback=_csv_list(float), show_default=True)
@click.option("--methods", default="niti_static,priot,priot_s", callback=_csv_list(str),
              show_default=True)
@click.option("--pruning-rates", default="0.9,0.8", callback=_csv_list(float), show_default=True)
@click.option("--selections", default="random,weight_based", callback=_csv_list(str),
              show_default=True)
@click.option("--seeds", default=10, show_default=True, help="Seeds 0..N-1 per scored method.")
@click.option("--epochs", default=30, show_default=True)
@click.option("--n-train", default=1024, show_default=True)
@click.option("--n-test", default=1024, show_default=True)
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
              help="YAML with shared run settings (lr shifts, loss, rounding...).")
@click.option("--force", is_flag=True)
def reproduce(out, checkpoint, do_pretrain, data, angles, methods, pruning_rates, selections,
              seeds, epochs, n_train, n_test, config_file, force):
    """Every method at every angle, then the comparison report."""
    _check_data(data)
    out = Path(out)
    if (out / "table.txt").exists() and not force:
        raise FileExistsError(f"refusing to overwrite {out / 'table.txt'} without --force")
    bad = [m for m in methods if m not in METHODS] + [s for s in selections if s not in SELECTIONS]
    if bad:
        raise click.BadParameter(f"unknown value(s): {', '.join(bad)}")
    if do_pretrain:
        checkpoint = str(out / "pretrained.ckpt")
        ctx = click.get_current_context()
        ctx.invoke(pretrain, data=data, out=checkpoint, force=True)
        ctx.invoke(calibrate_cmd, checkpoint=checkpoint, data=data, force=True)
    ckpt = load_checkpoint(checkpoint or fixture_checkpoint_path())
    base = ExperimentConfig.resolve(config_file, data=data, n_train=n_train, n_test=n_test,
                                    epochs=epochs)
    summaries = []
    for angle in angles:
        data_cache = transfer_data(ExperimentConfig(**dict(asdict(base), angle=angle)))
        for run in _run_grid(methods, pruning_rates, selections, seeds, base.rounding):
            cfg = ExperimentConfig(**dict(asdict(base), angle=angle, **run))
            name = _run_name(cfg)
            click.echo(f"{name}", err=True)
            _, s = train_one(cfg, out / "runs" / name, force, ckpt=ckpt, data=data_cache)
            summaries.append(s)
    table = R.comparison_table(summaries)
    from .dataio import atomic_write
    atomic_write(out / "table.txt", table.encode(), force=True)
    atomic_write(out / "history.csv", R.history_csv(summaries).encode(), force=True)
    click.echo(table, nl=False)


def _run_grid(methods, pruning_rates, selections, seeds, rounding):
    for method in methods:
        # without stochastic rounding the weight-update baselines have no random factor
        n = 1 if method.startswith("niti") and rounding != "stochastic" else seeds
        variants = ([dict(pruning_rate=p, selection=s) for p in pruning_rates for s in selections]
                    if method == "priot_s" else [{}])
        for v in variants:
            for seed in range(n):
                yield dict(method=method, seed=seed, **v)


def _run_name(cfg):
    label = cfg.method
    if cfg.method == "priot_s":
        label += f"_p{round(100 * cfg.pruning_rate)}_{cfg.selection}"
    return f"{label}_a{cfg.angle:g}_s{cfg.seed}"


# --------------------------------------------------------------------------

_EXIT_CLASSES = [
    ((ConfigError, FileExistsError, ValueError), EXIT_USAGE),
    ((DataError,), EXIT_DATA),
    ((InvariantError, CheckpointError, ModeMismatchError, FrozenScaleError), EXIT_INVARIANT),
]


def _exit_code(exc):
    # most specific class wins: DataError and CheckpointError are ValueErrors too
    for classes, code in reversed(_EXIT_CLASSES):
        if isinstance(exc, classes):
            return code
    return None


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="priot", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except Exception as exc:
        code = _exit_code(exc)
        if code is None:
            raise
        click.echo(f"error: {exc}", err=True)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
