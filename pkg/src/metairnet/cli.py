"""Command-line entry point: ``metairnet <command> CONFIG [options]``.

Exit codes: 0 success, 1 config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import functools
import logging
import sys
from pathlib import Path

import click
import torch

from .analysis import compare_sets
from .config import dump_config, load_config
from .errors import ConfigError, MetaIRNetError
from .pipeline import Experiment, load_image_set

logger = logging.getLogger("metairnet")


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except MetaIRNetError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(exc.exit_code)
    return wrapper


def _experiment(ctx: click.Context, config_path: str, overrides: dict | None = None) -> Experiment:
    overrides = dict(overrides or {})
    if ctx.obj.get("seed") is not None:
        overrides["seed"] = ctx.obj["seed"]
    cfg = load_config(config_path, overrides)
    torch.manual_seed(cfg.seed)
    return Experiment(cfg)


def _echo_report(name: str, report) -> None:
    click.echo(f"{name}: {report.mean_accuracy:.2f} +- {report.ci95:.2f} ({report.episode_count} episodes)")


@click.group()
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, seed, verbose):
    """Meta-reinforced image augmentation for one-shot fine-grained classification."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    ctx.ensure_object(dict)
    ctx.obj["seed"] = seed


@main.command("make-toy-data")
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--classes", default=20, show_default=True)
@click.option("--per-class", default=20, show_default=True)
@click.option("--size", default=64, show_default=True)
@click.pass_context
@_handle_errors
def make_toy_data(ctx, out_dir, classes, per_class, size):
    """Render the synthetic fine-grained dataset as a class-per-directory tree."""
    from .synthetic import write_toy_dataset

    seed = ctx.obj.get("seed") or 0
    ds = write_toy_dataset(out_dir, num_classes=classes, images_per_class=per_class, size=size, seed=seed)
    click.echo(f"wrote {len(ds)} images in {classes} classes to {out_dir}")


@main.command("pretrain-generator")
@click.argument("config", type=click.Path(dir_okay=False))
@click.pass_context
@_handle_errors
def pretrain_generator(ctx, config):
    """Train the quarter-width toy generator from scratch on the base classes."""
    from .generator import pretrain_toy_generator, save_generator

    exp = _experiment(ctx, config)
    g = exp.config.generator
    base = exp.part("base")
    gen = pretrain_toy_generator(
        base.images, torch.tensor(base.labels), len(exp.dataset.class_names), exp.feature_extractor,
        epochs=g.pretrain_epochs, lambda_p=exp.config.adapt.lambda_p, seed=exp.config.seed,
        latent_dim=g.latent_dim, embed_dim=g.embed_dim, width=g.width,
    )
    save_generator(gen, g.checkpoint)
    click.echo(f"generator written to {g.checkpoint}")


@main.command("finetune-gan")
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--shard", default="0/1", show_default=True, help="i/n: process every n-th image from i.")
@click.option("--split", "parts", default="base,val,novel", show_default=True)
@click.pass_context
@_handle_errors
def finetune_gan(ctx, config, shard, parts):
    """Adapt the generator to every image and cache its perturbed variants."""
    from .cache import populate_cache

    exp = _experiment(ctx, config)
    try:
        i, n = (int(v) for v in shard.split("/"))
    except ValueError:
        raise ConfigError(f"--shard must look like i/n, got {shard}") from None
    gen = exp.generator()
    total = 0
    for part in parts.split(","):
        ds = exp.part(part.strip())
        total += populate_cache(exp.cache, ds, gen, exp.feature_extractor, seed=exp.config.seed,
                                batch_size=exp.config.generator.batch_size, shard=(i, n))
    click.echo(f"cached {total} new image(s) in {exp.cache.root}")


@main.command("meta-train")
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--mode", default=None, help="Override train.augmentation_mode.")
@click.option("--flip/--no-flip", default=None, help="Override train.flip_enabled.")
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None)
@click.pass_context
@_handle_errors
def meta_train(ctx, config, mode, flip, checkpoint):
    """Meta-train on base classes, select by validation accuracy, evaluate on novel."""
    from .train import evaluate_model, run_meta_training, save_checkpoint

    overrides = {}
    if mode:
        overrides["train.augmentation_mode"] = mode
    if flip is not None:
        overrides["train.flip_enabled"] = flip
    exp = _experiment(ctx, config, overrides)
    cfg = exp.config
    tc = cfg.train_config()
    base, val, novel = exp.part("base"), exp.part("val"), exp.part("novel")
    lookup = exp.lookup([base, val], tc.augmentation_mode)
    result = run_meta_training(tc, base, val, lookup, val_q=cfg.eval.q,
                               on_epoch=lambda e, l, a: click.echo(f"epoch {e}: loss {l:.4f} val {a:.2f}"))
    path = Path(checkpoint) if checkpoint else exp.checkpoint_path
    save_checkpoint(path, result.model, cfg.hash(), result.val_accuracies[result.best_epoch - 1],
                    result.best_epoch, {"experiment_config": cfg.to_dict()})
    click.echo(f"best epoch {result.best_epoch}; checkpoint written to {path}")
    test_lookup = exp.lookup([novel], tc.augmentation_mode)
    report = evaluate_model(result.model, novel, tc.n, tc.m, cfg.eval.q, cfg.eval.episodes, cfg.seed,
                            lookup=test_lookup, spec=exp.augmentation_spec())
    _echo_report(f"test ({tc.augmentation_mode})", report)
    exp.append_ledger("meta-train", tc.augmentation_mode + ("+flip" if tc.flip_enabled else ""),
                      tc.n, tc.m, cfg.eval.q, report)


@main.command("evaluate")
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--mode", default=None, help="Augmentation applied at meta-test time.")
@click.option("--episodes", type=int, default=None)
@click.option("--shots", "m", type=int, default=None, help="Support images per class (5 for 5-shot).")
@click.option("--n-aug", type=int, default=None)
@click.option("--flip/--no-flip", default=None)
@click.pass_context
@_handle_errors
def evaluate(ctx, config, checkpoint, mode, episodes, m, n_aug, flip):
    """Evaluate a checkpoint on novel-class episodes and append a ledger row."""
    from .train import evaluate_model, load_checkpoint

    exp = _experiment(ctx, config)
    cfg = exp.config
    model, _ = load_checkpoint(checkpoint)
    mode = mode or model.config.augmentation_mode
    novel = exp.part("novel")
    m = m or cfg.train.m
    episodes = episodes or cfg.eval.episodes
    report = evaluate_model(model, novel, cfg.train.n, m, cfg.eval.q, episodes, cfg.seed, mode=mode,
                            n_aug=n_aug, lookup=exp.lookup([novel], mode), flip=flip,
                            spec=exp.augmentation_spec())
    _echo_report(f"test ({mode})", report)
    exp.append_ledger("evaluate", mode + ("+flip" if flip else ""), cfg.train.n, m, cfg.eval.q, report)


@main.command("evaluate-probes")
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True,
              help="Checkpoint whose classifier encoder supplies frozen features.")
@click.option("--training-data", type=click.Choice(["original", "generated", "mixed"]), default="original")
@click.option("--episodes", type=int, default=None)
@click.option("--split", "part", type=click.Choice(["val", "novel"]), default="val", show_default=True)
@click.pass_context
@_handle_errors
def evaluate_probes(ctx, config, checkpoint, training_data, episodes, part):
    """Nearest neighbour / logistic / softmax regression on frozen features."""
    from .probes import evaluate_frozen_probes
    from .train import load_checkpoint

    exp = _experiment(ctx, config)
    cfg = exp.config
    model, _ = load_checkpoint(checkpoint)
    ds = exp.part(part)
    lookup = exp.lookup([ds], "metairnet") if training_data != "original" else None
    reports = evaluate_frozen_probes(model.classifier, ds, cfg.train.n, cfg.train.m, cfg.eval.q,
                                     episodes or cfg.eval.probe_episodes, cfg.seed, training_data, lookup,
                                     cfg.eval.manual_pattern)
    for name, rep in reports.items():
        _echo_report(f"{name} ({training_data})", rep)
        exp.append_ledger("evaluate-probes", f"{name}:{training_data}", cfg.train.n, cfg.train.m, cfg.eval.q, rep)


@main.command("sweep-naug")
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--values", default=None, help="Comma-separated n_aug values (default eval.n_aug_values).")
@click.option("--episodes", type=int, default=None)
@click.pass_context
@_handle_errors
def sweep_naug(ctx, config, checkpoint, values, episodes):
    """Evaluate one checkpoint for several n_aug values on identical episodes."""
    from .train import load_checkpoint, run_naug_sweep

    exp = _experiment(ctx, config)
    cfg = exp.config
    model, _ = load_checkpoint(checkpoint)
    vals = [int(v) for v in values.split(",")] if values else cfg.eval.n_aug_values
    novel = exp.part("novel")
    mode = model.config.augmentation_mode
    results = run_naug_sweep(model, novel, vals, cfg.train.n, cfg.train.m, cfg.eval.q,
                             episodes or cfg.eval.episodes, cfg.seed, exp.lookup([novel], mode), mode)
    for v, rep in results:
        _echo_report(f"n_aug={v}", rep)
        exp.append_ledger("sweep-naug", f"{mode}:n_aug={v}", cfg.train.n, cfg.train.m, cfg.eval.q, rep)


@main.command("analyze-diversity")
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True,
              help="Supplies the embedding encoder (and the fusion network when sets are built).")
@click.option("--original", type=click.Path(), default=None)
@click.option("--generated", type=click.Path(), default=None)
@click.option("--fused", type=click.Path(), default=None)
@click.option("--labels/--no-labels", default=True, help="Also split distances into intra/inter-class.")
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.pass_context
@_handle_errors
def analyze_diversity(ctx, config, checkpoint, original, generated, fused, labels, out):
    """Pairwise-distance histograms and eigenvalue spectra of three image sets.

    Without explicit set paths the sets are built from the novel split: originals,
    one cached variant per original, and their fusion by the checkpoint's network.
    """
    from .analysis import build_diversity_sets, embedder_for
    from .train import load_checkpoint

    exp = _experiment(ctx, config)
    cfg = exp.config
    model, _ = load_checkpoint(checkpoint)
    paths = {"original": original, "generated": generated, "fused": fused}
    if any(paths.values()):
        sets, set_labels = {}, None
        for name, p in paths.items():
            if p is None:
                raise ConfigError(f"image set '{name}' not given (pass all three set paths or none)")
            ds = load_image_set(p, name, cfg.dataset.image_size, cfg.dataset.value_range)
            sets[name] = ds.images
            set_labels = ds.labels if set_labels is None else set_labels
            if len(ds) != len(sets["original"]):
                raise ConfigError(f"image set '{name}' has {len(ds)} images, 'original' has {len(sets['original'])}")
    else:
        novel = exp.part("novel")
        sets, set_labels = build_diversity_sets(model, novel, exp.lookup([novel], "metairnet"), cfg.seed,
                                                cfg.analysis.max_images)
    out_dir = Path(out) if out else exp.output_dir / "diversity"
    report = compare_sets(sets, embedder_for(model), set_labels if labels else None,
                          cfg.analysis.eigenvalues, out_dir)
    for name, s in report.items():
        line = f"{name}: mean {s.overall.mean:.3f} std {s.overall.stddev:.3f}"
        if s.intra is not None:
            line += f" | intra {s.intra.mean:.3f} inter {s.inter.mean:.3f}"
        click.echo(line)
    click.echo(f"artifacts written to {out_dir}")


@main.command("show-config")
@click.argument("config", type=click.Path(dir_okay=False))
@click.pass_context
@_handle_errors
def show_config(ctx, config):
    """Print the fully resolved config and its hash."""
    exp = _experiment(ctx, config)
    click.echo(dump_config(exp.config))
    click.echo(f"# hash: {exp.config.hash()}")


if __name__ == "__main__":
    main()
