"""Command-line interface for dtnmt."""

# Import future modules
from __future__ import annotations

# Import built-in modules
import dataclasses
import functools
import json
import logging
import os
import sys
from typing import Any
from typing import Callable
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence

# Import third-party modules
import click

# Import local modules
from dtnmt.__version__ import __version__
from dtnmt.ablation import run_ablation
from dtnmt.checkpoint import file_hash
from dtnmt.config import TrainConfig
from dtnmt.config import load_config
from dtnmt.data import Dataset
from dtnmt.data import generate_synthetic
from dtnmt.data import load_dataset
from dtnmt.data import save_dataset
from dtnmt.data import split_corpus
from dtnmt.data import synthetic_vocabulary
from dtnmt.errors import ConfigError
from dtnmt.errors import DtnmtError
from dtnmt.evaluation import SITES
from dtnmt.evaluation import build_report
from dtnmt.evaluation import cross_domain_matrix
from dtnmt.evaluation import decode_tests
from dtnmt.evaluation import export_representations
from dtnmt.evaluation import probe_classifier_accuracy
from dtnmt.supervision import TeacherSet
from dtnmt.training import finetune_teacher
from dtnmt.training import load_model
from dtnmt.training import train_baseline
from dtnmt.training import train_domain_control
from dtnmt.training import train_unified


logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


def handle_errors(func: Callable[..., None]) -> Callable[..., None]:
    """Report library errors as ``Error: ...`` on stderr and exit with status 1."""

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> None:
        try:
            func(*args, **kwargs)
        except ConfigError as e:
            click.echo("Error: invalid configuration", err=True)
            for item in e.errors:
                click.echo(f"  - {item}", err=True)
            sys.exit(1)
        except DtnmtError as e:
            click.echo(f"Error: {e}", err=True)
            sys.exit(1)

    return wrapper


def config_options(func: Callable[..., None]) -> Callable[..., None]:
    """Add ``--config``, ``--set`` and ``--seed``."""
    func = click.option("--seed", type=int, default=None, help="Run seed (shorthand for --set seed=N)")(func)
    func = click.option(
        "--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override a config value, e.g. model.d_model=32"
    )(func)
    func = click.option(
        "--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="TOML run configuration"
    )(func)
    return func


def data_option(func: Callable[..., None]) -> Callable[..., None]:
    return click.option(
        "--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False), help="Data directory"
    )(func)


def out_option(func: Callable[..., None]) -> Callable[..., None]:
    return click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output directory")(
        func
    )


def resolve_config(config_path: Optional[str], overrides: Sequence[str], seed: Optional[int]) -> TrainConfig:
    extra = [f"seed={seed}"] if seed is not None else []
    return load_config(config_path, [*overrides, *extra])


def fit_to_data(config: TrainConfig, dataset: Dataset) -> TrainConfig:
    """Take vocabulary size and domain count from the data directory."""
    data = dataclasses.replace(config.data, n_domains=len(dataset.train), sizes=[len(c) for c in dataset.train])
    return dataclasses.replace(config.with_vocab(len(dataset.vocab)), data=data)


def write_manifest(out_dir: str, command: str, config: TrainConfig, artifacts: Sequence[str], **extra: Any) -> str:
    """Record the command, resolved config, seed and artifact hashes; no timestamps."""
    os.makedirs(out_dir, exist_ok=True)
    manifest: Dict[str, Any] = {
        "command": command,
        "config": config.to_dict(),
        "seed": config.seed,
        "version": __version__,
        "artifacts": {os.path.relpath(p, out_dir).replace(os.sep, "/"): file_hash(p) for p in sorted(artifacts)},
    }
    manifest.update(extra)
    path = os.path.join(out_dir, MANIFEST)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(manifest, handle, sort_keys=True, indent=2)
        handle.write("\n")
    return path


def teacher_path(directory: str, name: str) -> str:
    return os.path.join(directory, f"teacher_{name}.ckpt")


@click.group()
@click.version_option(version=__version__)
@click.option("--verbose", "-v", is_flag=True, help="Show debug messages")
@click.option("--quiet", "-q", is_flag=True, help="Only show warnings and errors")
def cli(verbose: bool, quiet: bool) -> None:
    """dtnmt - multi-domain translation with domain transformation networks."""
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("dtnmt").setLevel(level)


@cli.command("gen-data")
@out_option
@config_options
@handle_errors
def gen_data(out_dir: str, config_path: Optional[str], overrides: Sequence[str], seed: Optional[int]) -> None:
    """Generate the synthetic multi-domain task into OUT."""
    config = resolve_config(config_path, overrides, seed)
    data = config.data
    corpora = generate_synthetic(
        config.seed,
        data.n_domains,
        [size + data.test_size for size in data.sizes],
        data.len_range,
        data.alphabet_size,
        data.domain_skew,
    )
    splits = [split_corpus(c, data.test_size) for c in corpora]
    vocab = synthetic_vocabulary(data.alphabet_size, [c.name for c in corpora])
    dataset = Dataset(
        vocab=vocab,
        train=[train for train, _ in splits],
        test=[test for _, test in splits] if data.test_size else [],
        meta={"command": "gen-data", "config": config.to_dict(), "seed": config.seed, "version": __version__},
    )
    save_dataset(out_dir, dataset)
    click.echo(f"Wrote {len(corpora)} domains to {out_dir}")


@cli.command("train-baseline")
@data_option
@out_option
@config_options
@handle_errors
def train_baseline_cmd(
    data_dir: str, out_dir: str, config_path: Optional[str], overrides: Sequence[str], seed: Optional[int]
) -> None:
    """Train the mixed-domain baseline."""
    dataset = load_dataset(data_dir)
    config = fit_to_data(resolve_config(config_path, overrides, seed), dataset)
    config = dataclasses.replace(config, log_path=os.path.join(out_dir, "train_log.csv"))
    result = train_baseline(config, dataset.train, path=os.path.join(out_dir, "baseline.ckpt"))
    write_manifest(out_dir, "train-baseline", config, [result.path, config.log_path])  # type: ignore[list-item]
    click.echo(f"Saved baseline to {result.path}")


@cli.command("finetune-teachers")
@data_option
@click.option("--base", required=True, type=click.Path(exists=True, dir_okay=False), help="Baseline checkpoint")
@out_option
@config_options
@handle_errors
def finetune_teachers_cmd(
    data_dir: str, base: str, out_dir: str, config_path: Optional[str], overrides: Sequence[str], seed: Optional[int]
) -> None:
    """Fine-tune one teacher per domain from the baseline."""
    dataset = load_dataset(data_dir)
    config = fit_to_data(resolve_config(config_path, overrides, seed), dataset)
    artifacts: List[str] = []
    for corpus in dataset.train:
        log_path = os.path.join(out_dir, f"finetune_{corpus.name}.csv")
        run_config = dataclasses.replace(config, log_path=log_path)
        result = finetune_teacher(base, corpus, run_config, path=teacher_path(out_dir, corpus.name))
        artifacts.extend([result.path, log_path])  # type: ignore[list-item]
        click.echo(f"Saved teacher for {corpus.name} to {result.path}")
    write_manifest(out_dir, "finetune-teachers", config, artifacts, base_sha256=file_hash(base))


@cli.command("train-domain-control")
@data_option
@out_option
@config_options
@handle_errors
def train_domain_control_cmd(
    data_dir: str, out_dir: str, config_path: Optional[str], overrides: Sequence[str], seed: Optional[int]
) -> None:
    """Train the baseline with a domain tag in front of every source."""
    dataset = load_dataset(data_dir)
    config = fit_to_data(resolve_config(config_path, overrides, seed), dataset)
    config = dataclasses.replace(config, log_path=os.path.join(out_dir, "train_log.csv"))
    path = os.path.join(out_dir, "domain_control.ckpt")
    result = train_domain_control(config, dataset.train, dataset.vocab, path=path)
    write_manifest(out_dir, "train-domain-control", config, [result.path, config.log_path])  # type: ignore[list-item]
    click.echo(f"Saved domain-control model to {result.path}")


def load_teachers(directory: Optional[str], dataset: Dataset, config: TrainConfig) -> Optional[TeacherSet]:
    if not config.supervision.needs_teachers:
        return None
    if not directory:
        raise ConfigError(["distillation is enabled; pass --teachers with the fine-tuned checkpoints"])
    paths = {c.domain: teacher_path(directory, c.name) for c in dataset.train}
    missing = [p for p in paths.values() if not os.path.exists(p)]
    if missing:
        raise ConfigError([f"missing teacher checkpoint {p}" for p in missing])
    return TeacherSet.from_checkpoints(paths, lam=config.lam)


@cli.command("train-unified")
@data_option
@click.option("--base", required=True, type=click.Path(exists=True, dir_okay=False), help="Baseline checkpoint")
@click.option("--teachers", "teachers_dir", type=click.Path(exists=True, file_okay=False), help="Teacher directory")
@out_option
@config_options
@handle_errors
def train_unified_cmd(
    data_dir: str,
    base: str,
    teachers_dir: Optional[str],
    out_dir: str,
    config_path: Optional[str],
    overrides: Sequence[str],
    seed: Optional[int],
) -> None:
    """Train the unified model with DTNs and the configured supervision."""
    dataset = load_dataset(data_dir)
    config = fit_to_data(resolve_config(config_path, overrides, seed), dataset)
    config = dataclasses.replace(config, log_path=os.path.join(out_dir, "train_log.csv"))
    teachers = load_teachers(teachers_dir, dataset, config)
    result = train_unified(base, dataset.train, config, teachers, path=os.path.join(out_dir, "unified.ckpt"))
    artifacts = [p for p in (result.path, config.log_path) if p]
    write_manifest(out_dir, "train-unified", config, artifacts, base_sha256=file_hash(base))
    click.echo(f"Saved unified model to {result.path}")


def _checkpoint_config(model: Any, fallback: TrainConfig) -> TrainConfig:
    stored = model.meta.get("config")
    return TrainConfig.from_dict(stored) if stored else fallback


@cli.command("evaluate")
@data_option
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False), help="Checkpoint to score")
@click.option("--reference", type=click.Path(exists=True, dir_okay=False), help="Checkpoint to compare against")
@out_option
@config_options
@handle_errors
def evaluate_cmd(
    data_dir: str,
    ckpt: str,
    reference: Optional[str],
    out_dir: str,
    config_path: Optional[str],
    overrides: Sequence[str],
    seed: Optional[int],
) -> None:
    """Score a checkpoint on every test domain."""
    dataset = load_dataset(data_dir)
    config = resolve_config(config_path, overrides, seed)
    model = load_model(ckpt)
    batch_size = config.decode_batch_size
    references = {c.name: c.targets for c in dataset.test}
    hypotheses = decode_tests(model, dataset.test, dataset.vocab, batch_size)
    reference_hyps = None
    reference_name = None
    if reference:
        reference_hyps = decode_tests(load_model(reference), dataset.test, dataset.vocab, batch_size)
        reference_name = os.path.splitext(os.path.basename(reference))[0]
    report = build_report(
        os.path.splitext(os.path.basename(ckpt))[0],
        hypotheses,
        references,
        reference_hypotheses=reference_hyps,
        reference_name=reference_name,
        checkpoint_sha256=model.sha256,
        config=_checkpoint_config(model, config).to_dict(),
        seed=config.seed,
    )
    json_path = os.path.join(out_dir, "report.json")
    csv_path = os.path.join(out_dir, "report.csv")
    report.to_json(json_path)
    report.to_csv(csv_path)
    write_manifest(out_dir, "evaluate", config, [json_path, csv_path], checkpoint_sha256=model.sha256)
    click.echo(report.format_table())


@cli.command("cross-matrix")
@data_option
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False), help="Unified checkpoint")
@out_option
@config_options
@handle_errors
def cross_matrix_cmd(
    data_dir: str, ckpt: str, out_dir: str, config_path: Optional[str], overrides: Sequence[str], seed: Optional[int]
) -> None:
    """Decode every test domain through every domain's DTN."""
    dataset = load_dataset(data_dir)
    config = resolve_config(config_path, overrides, seed)
    model = load_model(ckpt)
    matrix = cross_domain_matrix(model.params, model.bank, dataset.test, config.decode_batch_size)
    path = os.path.join(out_dir, "cross_matrix.csv")
    text = matrix.to_csv(path)
    write_manifest(out_dir, "cross-matrix", config, [path], checkpoint_sha256=model.sha256)
    click.echo(text, nl=False)


@cli.command("probe")
@data_option
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False), help="Checkpoint to probe")
@click.option(
    "--site", type=click.Choice([*SITES, "both"]), default="both", show_default=True, help="Representation to probe"
)
@out_option
@config_options
@handle_errors
def probe_cmd(
    data_dir: str,
    ckpt: str,
    site: str,
    out_dir: str,
    config_path: Optional[str],
    overrides: Sequence[str],
    seed: Optional[int],
) -> None:
    """Train domain probes on frozen representations and report held-out accuracy."""
    dataset = load_dataset(data_dir)
    config = resolve_config(config_path, overrides, seed)
    model = load_model(ckpt)
    corpora = dataset.test or dataset.train
    sites = list(SITES) if site == "both" else [site]
    accuracies = {
        s: probe_classifier_accuracy(
            model.params, model.bank, corpora, s, config.probe_steps, config.seed, config.optim
        )
        for s in sites
    }
    path = os.path.join(out_dir, "probe.json")
    os.makedirs(out_dir, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        json.dump({"accuracy": accuracies, "checkpoint_sha256": model.sha256}, handle, sort_keys=True, indent=2)
        handle.write("\n")
    write_manifest(out_dir, "probe", config, [path], checkpoint_sha256=model.sha256)
    for s, accuracy in accuracies.items():
        click.echo(f"{s}: {accuracy:.4f}")


@cli.command("export-reprs")
@data_option
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False), help="Checkpoint to export")
@out_option
@config_options
@handle_errors
def export_reprs_cmd(
    data_dir: str, ckpt: str, out_dir: str, config_path: Optional[str], overrides: Sequence[str], seed: Optional[int]
) -> None:
    """Export pooled encoder and DTN representations of the test sentences."""
    dataset = load_dataset(data_dir)
    config = resolve_config(config_path, overrides, seed)
    model = load_model(ckpt)
    paths = export_representations(
        model.params,
        model.bank,
        dataset.test or dataset.train,
        os.path.join(out_dir, "representations.csv"),
        classifiers=model.classifiers,
    )
    write_manifest(out_dir, "export-reprs", config, list(paths), checkpoint_sha256=model.sha256)
    click.echo(f"Wrote {paths[0]} and {paths[1]}")


@cli.command("ablate")
@data_option
@click.option("--base", type=click.Path(exists=True, dir_okay=False), help="Baseline checkpoint (trained if omitted)")
@click.option("--teachers", "teachers_dir", type=click.Path(exists=True, file_okay=False), help="Teacher directory")
@out_option
@config_options
@handle_errors
def ablate_cmd(
    data_dir: str,
    base: Optional[str],
    teachers_dir: Optional[str],
    out_dir: str,
    config_path: Optional[str],
    overrides: Sequence[str],
    seed: Optional[int],
) -> None:
    """Train and score every supervision configuration from one baseline."""
    dataset = load_dataset(data_dir)
    config = fit_to_data(resolve_config(config_path, overrides, seed), dataset)
    base_params = load_model(base).params if base else None
    teachers = None
    if teachers_dir:
        paths = {c.domain: teacher_path(teachers_dir, c.name) for c in dataset.train}
        teachers = TeacherSet.from_checkpoints(paths, lam=config.lam)
    path = os.path.join(out_dir, "ablation.csv")
    run_ablation(config, dataset.train, dataset.test, path, base=base_params, teachers=teachers)
    write_manifest(out_dir, "ablate", config, [path])
    with open(path, encoding="utf-8") as handle:
        click.echo(handle.read(), nl=False)


def main() -> None:
    """Main entry point for the CLI."""
    cli()
