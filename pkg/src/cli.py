"""Batch command line: corpus generation, detector and agent training, attack
campaigns, ablation, transfer, single-action mutation and sequence mining.

Every command echoes its resolved flag set into the header of what it writes.
"""

import dataclasses
import functools
import re
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import click

from src.argument_parser import (
    RunConfig,
    configure_logging,
    logger,
    write_flagged_csv,
    write_flags_sidecar,
)
from src.attack_env import AttackEnv, EpisodeConfig
from src.campaign_eval import (
    ABLATION_ARMS,
    AblationConfig,
    CampaignConfig,
    mine_sequences,
    policy_from_spec,
    read_traces,
    report_table,
    run_ablation,
    run_comparison,
    run_transfer,
    sequence_table,
    write_report,
    write_traces,
    write_variants,
)
from src.corpus_tools import (
    BENIGN_CATEGORY,
    LABEL_MALICIOUS,
    MALICIOUS_CATEGORIES,
    GeneratorConfig,
    build_corpus,
    labeled_corpus,
    load_manifest,
    load_samples,
)
from src.detectors import (
    DetectorKind,
    DetectorModel,
    DetectorTrainConfig,
    evaluate_detector,
    load_detector,
    save_detector,
    train_detector,
)
from src.dqn_agent import QNetwork, TrainConfig, load_checkpoint, save_checkpoint, train_agent
from src.errors import TestbedError
from src.mutation_actions import ActionConfig, action_from_name, apply_action, randomness_source
from src.pe_model import parse_pe, validate_structure

DETECTOR_SUFFIX = ".obfd"
AGENT_FILE = "dqn.obfq"
DEFAULT_THRESHOLD = 0.5


def coded_errors(command: Callable) -> Callable:
    """Turn any coded error into a one-line diagnostic and exit status 1."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except TestbedError as e:
            logger.error(f"{type(e).__name__}: {e}")
            raise click.ClickException(str(e)) from e

    return wrapper


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text)


def _detector_path(models: Path, kind: str, checkpoint: Optional[Path]) -> Path:
    return checkpoint if checkpoint is not None else models / f"{kind}{DETECTOR_SUFFIX}"


def resolve_detector(
    kind: str, models: Path, checkpoint: Optional[Path], threshold: Optional[float] = None
) -> DetectorModel:
    """Load a trained checkpoint, or configure the scanners that need no training.

    A given ``threshold`` replaces the checkpoint's own; ``None`` keeps it.
    """
    path = _detector_path(models, kind, checkpoint)
    if path.exists():
        model = load_detector(path)
        if threshold is not None and threshold != model.threshold:
            logger.info(f"{kind}: threshold {model.threshold} from {path} replaced by {threshold}")
            model = dataclasses.replace(model, threshold=threshold)
        return model
    if kind in (DetectorKind.SIGSCAN.value, DetectorKind.EXTERNAL.value):
        config = DetectorTrainConfig(threshold=DEFAULT_THRESHOLD if threshold is None else threshold)
        return train_detector(kind, [], config)
    raise click.ClickException(f"no {kind} checkpoint at {path}; run train-detector first")


def _campaign_config(seed: int, query_limit: int, jobs: int, keep_variants: bool = False) -> CampaignConfig:
    return CampaignConfig(
        seed=seed,
        query_limit=query_limit,
        jobs=jobs,
        keep_variants=keep_variants,
        action_config=ActionConfig.from_environment(),
    )


def _load_agent(agent: Optional[Path], models: Path) -> QNetwork:
    path = agent or models / AGENT_FILE
    if not path.exists():
        raise click.ClickException(f"no Q-network checkpoint at {path}; run train-agent first")
    return load_checkpoint(path)


def _attack_samples(corpus: Path):
    samples = load_samples(load_manifest(corpus), label=LABEL_MALICIOUS)
    if not samples:
        raise click.ClickException(f"corpus {corpus} holds no malicious-proxy samples")
    return samples


# ---------------------------------------------------------------------------
# Shared options
# ---------------------------------------------------------------------------

def seed_option(f):
    return click.option("--seed", type=int, default=0, show_default=True, help="Global seed.")(f)


def corpus_option(f):
    return click.option(
        "--corpus", type=click.Path(exists=True, path_type=Path), required=True,
        help="Corpus manifest, or the directory holding manifest.jsonl.",
    )(f)


def models_option(f):
    return click.option(
        "--models", type=click.Path(path_type=Path), default=Path("models"), show_default=True,
        help="Directory for detector and agent checkpoints.",
    )(f)


def detector_options(f):
    f = click.option(
        "--detector", type=click.Choice([k.value for k in DetectorKind]), default="featboost", show_default=True,
    )(f)
    f = click.option(
        "--threshold", type=float, default=None,
        help=f"Decision threshold; defaults to the checkpoint's ({DEFAULT_THRESHOLD} when training).",
    )(f)
    f = click.option(
        "--detector-checkpoint", type=click.Path(path_type=Path), default=None,
        help="Detector checkpoint; defaults to <models>/<detector>.obfd.",
    )(f)
    return f


def budget_options(f):
    f = click.option("--query-limit", type=int, default=5, show_default=True, help="Detector queries per sample.")(f)
    f = click.option("--jobs", type=int, default=1, show_default=True, help="Worker processes across samples.")(f)
    return f


@click.group()
@click.option("--debug", is_flag=True, help="Enable debug logging.")
@click.option("--verbose", is_flag=True, help="Enable verbose logging.")
@click.option(
    "--log-file", type=click.Path(dir_okay=False, path_type=Path), default=None,
    help="Also log here; --debug alone logs to debug_log.txt.",
)
def cli(debug: bool, verbose: bool, log_file: Optional[Path]) -> None:
    """Desk-scale PE evasion testbed."""
    configure_logging(debug, verbose, log_file)


@cli.command("gen-corpus")
@seed_option
@click.option("--out", type=click.Path(path_type=Path), default=Path("corpus"), show_default=True)
@click.option("--per-category", type=int, default=20, show_default=True, help="Malicious-proxy files per category.")
@click.option("--benign", type=int, default=100, show_default=True, help="Benign files.")
@click.option("--jobs", type=int, default=1, show_default=True)
@coded_errors
def cmd_gen_corpus(seed: int, out: Path, per_category: int, benign: int, jobs: int) -> None:
    """Generate a synthetic corpus and its manifest."""
    if per_category < 0 or benign < 0:
        raise click.BadParameter("counts must be non-negative")
    run = RunConfig(seed=seed, corpus=out, jobs=jobs, extra={"per_category": per_category, "benign": benign})
    counts = {**{c: per_category for c in MALICIOUS_CATEGORIES}, BENIGN_CATEGORY: benign}
    manifest = build_corpus(GeneratorConfig(seed=seed), counts, out, jobs=jobs)
    write_flags_sidecar(out / "manifest.jsonl", run.flags())
    click.echo(f"wrote {len(manifest)} files to {out}")


@cli.command("train-detector")
@seed_option
@corpus_option
@models_option
@detector_options
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Checkpoint path.")
@click.option("--no-section-rules", is_flag=True, help="SigScan: drop the packer section-name rule.")
@coded_errors
def cmd_train_detector(
    seed: int, corpus: Path, models: Path, detector: str, threshold: Optional[float],
    detector_checkpoint: Optional[Path], out: Optional[Path], no_section_rules: bool,
) -> None:
    """Train (or configure) a detector and write its OBFD1 checkpoint."""
    threshold = DEFAULT_THRESHOLD if threshold is None else threshold
    run = RunConfig(seed=seed, corpus=corpus, models=models, detector=detector, threshold=threshold)
    config = DetectorTrainConfig(seed=seed, threshold=threshold, **({"section_names": ()} if no_section_rules else {}))
    samples = labeled_corpus(load_samples(load_manifest(corpus)))
    model = train_detector(detector, samples, config)
    evaluation = evaluate_detector(model, samples) if samples else None
    target = out or _detector_path(models, detector, detector_checkpoint)
    target.parent.mkdir(parents=True, exist_ok=True)
    save_detector(model, target)
    write_flags_sidecar(target, run.flags())
    if evaluation is not None:
        logger.info(f"{detector} training accuracy {evaluation.accuracy:.3f} over {evaluation.total} samples")
        click.echo(f"{detector}: accuracy {evaluation.accuracy:.3f} -> {target}")
    else:
        click.echo(f"{detector} -> {target}")


@cli.command("train-agent")
@seed_option
@corpus_option
@models_option
@detector_options
@click.option("--episodes", type=int, default=2000, show_default=True)
@click.option("--query-limit", type=int, default=5, show_default=True)
@click.option("--double-dqn", is_flag=True, help="Double-DQN bootstrap target.")
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Checkpoint path.")
@coded_errors
def cmd_train_agent(
    seed: int, corpus: Path, models: Path, detector: str, threshold: Optional[float],
    detector_checkpoint: Optional[Path], episodes: int, query_limit: int, double_dqn: bool, out: Optional[Path],
) -> None:
    """Train the DQN attacker; writes the OBFQ1 checkpoint and a training log."""
    model = resolve_detector(detector, models, detector_checkpoint, threshold)
    run = RunConfig(
        seed=seed, corpus=corpus, models=models, detector=detector, threshold=model.threshold,
        query_limit=query_limit, episodes=episodes, extra={"double_dqn": double_dqn},
    )
    samples = _attack_samples(corpus)
    episode_config = EpisodeConfig(query_limit=query_limit, seed=seed)
    action_config = ActionConfig.from_environment()
    result = train_agent(
        lambda: AttackEnv(model, episode_config, action_config),
        samples,
        TrainConfig(episodes=episodes, seed=seed, double_dqn=double_dqn, epsilon_decay_episodes=max(1, episodes)),
    )
    target = out or models / AGENT_FILE
    target.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.net, target)
    write_flags_sidecar(target, run.flags())
    write_flagged_csv(result.log, Path(str(target) + ".log.csv"), run.flags())
    evaded = float(result.log["evaded"].mean()) if len(result.log) else 0.0
    click.echo(f"trained {episodes} episodes (training evasion {evaded:.3f}) -> {target}")


@cli.command("attack")
@seed_option
@corpus_option
@models_option
@detector_options
@budget_options
@click.option(
    "--policy", "policies", multiple=True, default=("dqn",), show_default=True,
    help="dqn, random, obf-only or sequence:<names>; repeat to compare methods.",
)
@click.option("--agent", type=click.Path(path_type=Path), default=None, help="Q-network checkpoint for dqn.")
@click.option("--out", type=click.Path(path_type=Path), default=Path("reports"), show_default=True)
@click.option("--save-variants", type=click.Path(path_type=Path), default=None, help="Write evasive variants here.")
@coded_errors
def cmd_attack(
    seed: int, corpus: Path, models: Path, detector: str, threshold: Optional[float],
    detector_checkpoint: Optional[Path], query_limit: int, jobs: int, policies: Tuple[str, ...],
    agent: Optional[Path], out: Path, save_variants: Optional[Path],
) -> None:
    """Run attack campaigns; writes traces plus the evasion report."""
    model = resolve_detector(detector, models, detector_checkpoint, threshold)
    run = RunConfig(
        seed=seed, corpus=corpus, models=models, reports=out, detector=detector, threshold=model.threshold,
        query_limit=query_limit, policies=policies, jobs=jobs,
    )
    net = None
    if "dqn" in policies:
        net = _load_agent(agent, models)
    resolved = [policy_from_spec(p, net) for p in policies]
    samples = _attack_samples(corpus)
    results = run_comparison(samples, resolved, model, _campaign_config(seed, query_limit, jobs, bool(save_variants)))

    for spec, result in zip(policies, results):
        name = "traces.jsonl" if len(policies) == 1 else f"traces_{_slug(spec)}.jsonl"
        write_traces(result.traces, out / name, {**run.flags(), "policy": spec})
        if save_variants is not None:
            write_variants(result, save_variants if len(policies) == 1 else save_variants / _slug(spec))
    write_report([r.report for r in results], out / "report.csv", run.flags(), row_names=list(policies))
    for spec, result in zip(policies, results):
        overall = result.report.overall
        click.echo(f"{spec}: {overall.evaded}/{overall.attacked} evaded ({overall.rate:.2%})")


@cli.command("ablate")
@seed_option
@corpus_option
@models_option
@detector_options
@budget_options
@click.option("--episodes", type=int, default=2000, show_default=True, help="Training episodes per learning arm.")
@click.option(
    "--arms", default=",".join(ABLATION_ARMS), show_default=True, help="Comma-separated subset of the arms.",
)
@click.option("--out", type=click.Path(path_type=Path), default=Path("reports"), show_default=True)
@coded_errors
def cmd_ablate(
    seed: int, corpus: Path, models: Path, detector: str, threshold: Optional[float],
    detector_checkpoint: Optional[Path], query_limit: int, jobs: int, episodes: int, arms: str, out: Path,
) -> None:
    """Paired ablation of the learning and obfuscation components."""
    selected = tuple(a.strip() for a in arms.split(",") if a.strip())
    unknown = [a for a in selected if a not in ABLATION_ARMS]
    if unknown or not selected:
        raise click.BadParameter(f"arms must come from {', '.join(ABLATION_ARMS)}", param_hint="--arms")
    model = resolve_detector(detector, models, detector_checkpoint, threshold)
    run = RunConfig(
        seed=seed, corpus=corpus, models=models, reports=out, detector=detector, threshold=model.threshold,
        query_limit=query_limit, episodes=episodes, jobs=jobs, extra={"arms": list(selected)},
    )
    config = AblationConfig(
        campaign=_campaign_config(seed, query_limit, jobs),
        train=TrainConfig(episodes=episodes, seed=seed, epsilon_decay_episodes=max(1, episodes)),
        arms=selected,
    )
    reports = run_ablation(_attack_samples(corpus), model, config)
    write_report(list(reports.values()), out / "ablation.csv", run.flags(), row_names=list(reports))
    click.echo(report_table(list(reports.values()), list(reports)).to_string(index=False))


def _eval_detector(spec: str, models: Path) -> DetectorModel:
    """A checkpoint path, or a detector kind resolved under ``models``; either keeps its own threshold."""
    path = Path(spec)
    if path.exists():
        return load_detector(path)
    if spec in [k.value for k in DetectorKind]:
        return resolve_detector(spec, models, None)
    raise click.BadParameter(f"{spec} is neither a checkpoint nor a detector kind", param_hint="--eval-detector")


@cli.command("transfer")
@seed_option
@corpus_option
@models_option
@detector_options
@budget_options
@click.option(
    "--eval-detector", "eval_detectors", multiple=True, required=True,
    help="Checkpoint path or detector kind to rescan with; repeatable.",
)
@click.option("--policy", default="dqn", show_default=True)
@click.option("--agent", type=click.Path(path_type=Path), default=None)
@click.option("--out", type=click.Path(path_type=Path), default=Path("reports"), show_default=True)
@coded_errors
def cmd_transfer(
    seed: int, corpus: Path, models: Path, detector: str, threshold: Optional[float],
    detector_checkpoint: Optional[Path], query_limit: int, jobs: int, eval_detectors: Tuple[str, ...],
    policy: str, agent: Optional[Path], out: Path,
) -> None:
    """Craft variants against one detector and rescan them with others."""
    model = resolve_detector(detector, models, detector_checkpoint, threshold)
    run = RunConfig(
        seed=seed, corpus=corpus, models=models, reports=out, detector=detector, threshold=model.threshold,
        query_limit=query_limit, policies=(policy,), jobs=jobs, extra={"eval_detectors": list(eval_detectors)},
    )
    net = _load_agent(agent, models) if policy == "dqn" else None
    evaluators = [_eval_detector(spec, models) for spec in eval_detectors]
    result = run_transfer(
        _attack_samples(corpus), model, evaluators, policy_from_spec(policy, net),
        _campaign_config(seed, query_limit, jobs),
    )
    write_traces(result.campaign.traces, out / "transfer_traces.jsonl", run.flags())
    write_flagged_csv(result.matrix, out / "transfer.csv", run.flags())
    click.echo(result.matrix.to_string(index=False))


@cli.command("mutate")
@click.argument("input_file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--action", "action_name", required=True, help="Action name, e.g. OverlayAppend or 'XOR EL2'.")
@seed_option
@click.option("--out", type=click.Path(path_type=Path), required=True)
@coded_errors
def cmd_mutate(input_file: Path, action_name: str, seed: int, out: Path) -> None:
    """Apply one named action to one file."""
    action = action_from_name(action_name)
    pe = parse_pe(input_file.read_bytes())
    mutated = apply_action(pe, action, randomness_source(seed), ActionConfig.from_environment())
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(mutated.raw)
    report = validate_structure(mutated)
    status = "valid" if report.is_valid else "invalid: " + ", ".join(c.value for c in report.codes())
    click.echo(f"{action.variant}: {len(pe.raw)} -> {len(mutated.raw)} bytes, {status}")


@cli.command("analyze")
@click.argument("traces", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--max-len", type=int, default=3, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), default=None, help="CSV path; prints the table when omitted.")
@coded_errors
def cmd_analyze(traces: Path, max_len: int, out: Optional[Path]) -> None:
    """Mine the action sequences of evasive episodes."""
    if max_len < 1:
        raise click.BadParameter("must be at least 1", param_hint="--max-len")
    flags, loaded = read_traces(traces)
    table = sequence_table(mine_sequences(loaded, max_len))
    if out is not None:
        write_flagged_csv(table, out, {**flags, "traces": str(traces), "max_len": max_len})
    click.echo(table.to_string(index=False) if len(table) else "no evasive sequences")


def main(argv: Optional[Sequence[str]] = None) -> None:
    cli.main(args=list(argv) if argv is not None else None, prog_name="evasion-testbed")


__all__: List[str] = ["cli", "main"]
