"""Attack campaigns and the reports built from them.

A campaign runs one episode per corpus sample under a policy and a detector,
and aggregates the traces into per-category evasion rates. Ablation, transfer
and method-comparison experiments are campaigns run side by side on the same
samples with the same per-sample seeds.
"""

import hashlib
import io
import json
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, NamedTuple, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.argument_parser import logger, write_flagged_csv
from src.attack_env import AttackEnv, EpisodeConfig, EpisodeTrace, Sample
from src.detectors import Detector, Label
from src.dqn_agent import QNetwork, TrainConfig, select_action, train_agent
from src.errors import (
    DegenerateCorpus,
    InvalidCounts,
    NoAttackableSamples,
    PeFormatError,
    SampleNotDetected,
    ScanFailed,
)
from src.mutation_actions import (
    ALL_ACTIONS,
    NON_OBFUSCATION_ACTIONS,
    XOR_ACTIONS,
    ActionConfig,
    MutationAction,
    action_from_name,
)

__all__ = [
    "EpisodeTrace",
    "CampaignConfig",
    "CampaignResult",
    "EvasionReport",
    "evasion_rate",
    "mine_sequences",
    "run_campaign",
    "run_ablation",
    "run_comparison",
    "run_transfer",
]

OVERALL = "Average"


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

class Policy(Protocol):
    policy_id: str

    def choose(self, state: np.ndarray, step_index: int, rng: np.random.Generator) -> int:
        ...


@dataclass(frozen=True, eq=False)
class DqnPolicy:
    """Greedy policy of a trained Q-network, optionally masked to a subset of actions."""

    net: QNetwork
    allowed: Optional[Tuple[int, ...]] = None
    policy_id: str = "dqn"

    def choose(self, state: np.ndarray, step_index: int, rng: np.random.Generator) -> int:
        return select_action(self.net, state, 0.0, rng, self.allowed)


@dataclass(frozen=True)
class RandomPolicy:
    actions: Tuple[MutationAction, ...] = ALL_ACTIONS
    policy_id: str = "random"

    def __post_init__(self) -> None:
        if not self.actions:
            raise ValueError("random policy needs at least one action")

    def choose(self, state: np.ndarray, step_index: int, rng: np.random.Generator) -> int:
        return int(self.actions[int(rng.integers(len(self.actions)))])


@dataclass(frozen=True)
class ObfuscationOnlyPolicy(RandomPolicy):
    """Uniform-random over the XOR encryption levels; no learning."""

    actions: Tuple[MutationAction, ...] = XOR_ACTIONS
    policy_id: str = "obf-only"


@dataclass(frozen=True)
class SequencePolicy:
    """Fixed action sequence, repeated from the start once exhausted."""

    actions: Tuple[MutationAction, ...]
    policy_id: str = ""

    def __post_init__(self) -> None:
        if not self.actions:
            raise ValueError("sequence policy needs at least one action")
        if not self.policy_id:
            object.__setattr__(self, "policy_id", "sequence:" + ",".join(a.variant for a in self.actions))

    def choose(self, state: np.ndarray, step_index: int, rng: np.random.Generator) -> int:
        return int(self.actions[step_index % len(self.actions)])


def policy_from_spec(spec: str, net: Optional[QNetwork] = None) -> Policy:
    """Parse ``dqn``, ``random``, ``obf-only`` or ``sequence:<name>,<name>,...``.

    Raises:
        UnknownAction: a sequence names an unknown action
        ValueError: unknown policy, or ``dqn`` without a network
    """
    spec = spec.strip()
    if spec == "dqn":
        if net is None:
            raise ValueError("the dqn policy needs a trained Q-network checkpoint")
        return DqnPolicy(net)
    if spec == "random":
        return RandomPolicy()
    if spec == "obf-only":
        return ObfuscationOnlyPolicy()
    if spec.startswith("sequence:"):
        names = [n for n in spec[len("sequence:"):].split(",") if n.strip()]
        return SequencePolicy(tuple(action_from_name(n) for n in names))
    raise ValueError(f"unknown policy {spec!r}; expected dqn, random, obf-only or sequence:<names>")


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def evasion_rate(evaded: int, attacked: int) -> float:
    """E = M_e / M_t.

    Raises:
        InvalidCounts: ``attacked`` < 1 or ``evaded`` outside [0, attacked]
    """
    if attacked < 1 or not 0 <= evaded <= attacked:
        raise InvalidCounts(f"cannot form an evasion rate from {evaded} evaded of {attacked} attacked")
    return evaded / attacked


class CategoryCount(NamedTuple):
    evaded: int
    attacked: int

    @property
    def rate(self) -> float:
        return evasion_rate(self.evaded, self.attacked)


@dataclass(frozen=True)
class EvasionReport:
    """Per-category and overall evasion counts of one campaign."""

    categories: Dict[str, CategoryCount]
    overall: CategoryCount
    detector_id: str
    policy_id: str
    config_digest: str
    invalid_artifacts: int = 0
    rejected: Tuple[str, ...] = ()

    @classmethod
    def from_traces(
        cls,
        traces: Sequence[EpisodeTrace],
        detector_id: str,
        policy_id: str,
        config_digest: str,
        rejected: Sequence[str] = (),
    ) -> "EvasionReport":
        evaded: Counter = Counter()
        attacked: Counter = Counter()
        for trace in traces:
            attacked[trace.category] += 1
            evaded[trace.category] += trace.evaded
        categories = {c: CategoryCount(evaded[c], attacked[c]) for c in sorted(attacked)}
        overall = CategoryCount(sum(evaded.values()), len(traces))
        return cls(
            categories, overall, detector_id, policy_id, config_digest,
            invalid_artifacts=sum(not t.structurally_valid for t in traces),
            rejected=tuple(rejected),
        )

    def rates(self) -> Dict[str, float]:
        out = {category: count.rate for category, count in self.categories.items()}
        out[OVERALL] = self.overall.rate
        return out

    def summary(self) -> Dict[str, Any]:
        return {
            "policy_id": self.policy_id,
            "detector_id": self.detector_id,
            "config_digest": self.config_digest,
            "categories": {
                c: {"M_e": n.evaded, "M_t": n.attacked, "E": n.rate} for c, n in self.categories.items()
            },
            "overall": {"M_e": self.overall.evaded, "M_t": self.overall.attacked, "E": self.overall.rate},
            "invalid_artifacts": self.invalid_artifacts,
            "rejected": list(self.rejected),
        }


def report_table(reports: Sequence[EvasionReport], row_names: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """One row per report (method or arm), one column per category, then ``Average``.

    ``Average`` is the pooled rate over all attacked samples. Categories a
    report has no samples for are left empty.
    """
    names = list(row_names) if row_names is not None else [r.policy_id for r in reports]
    categories = sorted({c for r in reports for c in r.categories})
    rows = []
    for name, report in zip(names, reports):
        rates = report.rates()
        rows.append({"method": name, **{c: rates.get(c, np.nan) for c in categories}, OVERALL: rates[OVERALL]})
    return pd.DataFrame(rows, columns=["method"] + categories + [OVERALL])


# ---------------------------------------------------------------------------
# Campaigns
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CampaignConfig:
    seed: int = 0
    query_limit: int = 5
    count_confirmation_query: bool = False
    jobs: int = 1
    keep_variants: bool = False
    action_config: ActionConfig = field(default_factory=ActionConfig)

    def episode_config(self, sample_seed: int) -> EpisodeConfig:
        return EpisodeConfig(
            query_limit=self.query_limit,
            seed=sample_seed,
            count_confirmation_query=self.count_confirmation_query,
        )

    def digest(self, detector_id: str, policy_id: str) -> str:
        payload = {k: v for k, v in asdict(self).items() if k not in ("jobs", "keep_variants")}
        payload.update(detector_id=detector_id, policy_id=policy_id)
        return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()


def sample_seed(seed: int, index: int) -> int:
    return seed ^ index


class EpisodeOutcome(NamedTuple):
    index: int
    trace: Optional[EpisodeTrace]
    final_bytes: Optional[bytes]
    rejection: Optional[str]


def attack_sample(
    indexed: Tuple[int, Sample],
    policy: Policy,
    detector: Detector,
    config: CampaignConfig,
) -> EpisodeOutcome:
    """Run one episode.

    A sample the detector does not flag, or whose scan fails at any point of
    the episode, comes back as a rejection instead of a trace.
    """
    index, sample = indexed
    seed = sample_seed(config.seed, index)
    env = AttackEnv(detector, config.episode_config(seed), config.action_config)
    rng = np.random.default_rng((config.seed, index))
    try:
        state = env.reset(sample.data, seed=seed, sample_id=sample.sample_id, category=sample.category)
    except SampleNotDetected:
        return EpisodeOutcome(index, None, None, "not detected")
    except PeFormatError as e:
        return EpisodeOutcome(index, None, None, f"unparseable: {e}")
    except ScanFailed as e:
        return _scan_failure(index, sample, env, e)
    while not env.done:
        action = policy.choose(state.observation, state.steps_taken, rng)
        try:
            state = env.step(MutationAction(action)).state
        except ScanFailed as e:
            return _scan_failure(index, sample, env, e)
    final = env.current_bytes if config.keep_variants else None
    return EpisodeOutcome(index, env.episode_trace(), final, None)


def _scan_failure(index: int, sample: Sample, env: AttackEnv, error: ScanFailed) -> EpisodeOutcome:
    logger.warning(f"Scan failed on {sample.sample_id} after {env.queries_used} queries: {error}")
    return EpisodeOutcome(index, None, None, f"scan failed: {error}")


@dataclass(frozen=True)
class CampaignResult:
    report: EvasionReport
    traces: Tuple[EpisodeTrace, ...]
    variants: Dict[str, bytes] = field(default_factory=dict)


def run_campaign(
    corpus: Sequence[Sample],
    policy: Policy,
    detector: Detector,
    config: CampaignConfig = CampaignConfig(),
) -> CampaignResult:
    """One episode per sample, aggregated in sample order.

    Samples that are not flagged at reset, do not parse, or hit a scanner
    failure are listed in the report's ``rejected`` and excluded from M_t.

    Raises:
        DegenerateCorpus: ``corpus`` is empty
        NoAttackableSamples: every sample was rejected
    """
    if not corpus:
        raise DegenerateCorpus("campaign corpus is empty")
    worker = partial(attack_sample, policy=policy, detector=detector, config=config)
    items = list(enumerate(corpus))
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            outcomes = list(pool.map(worker, items))
    else:
        outcomes = [worker(item) for item in items]

    traces: List[EpisodeTrace] = []
    variants: Dict[str, bytes] = {}
    rejected: List[str] = []
    for outcome in outcomes:
        sample = corpus[outcome.index]
        if outcome.trace is None:
            logger.info(f"Rejected {sample.sample_id}: {outcome.rejection}")
            rejected.append(sample.sample_id)
            continue
        traces.append(outcome.trace)
        if outcome.final_bytes is not None:
            variants[sample.sample_id] = outcome.final_bytes
    if not traces:
        raise NoAttackableSamples(f"all {len(corpus)} samples were rejected")

    detector_id = getattr(detector, "detector_id", type(detector).__name__)
    report = EvasionReport.from_traces(
        traces, detector_id, policy.policy_id, config.digest(detector_id, policy.policy_id), rejected
    )
    logger.info(
        f"{policy.policy_id} vs {detector_id}: {report.overall.evaded}/{report.overall.attacked} evaded "
        f"({report.overall.rate:.2%}), {len(rejected)} rejected"
    )
    return CampaignResult(report, tuple(traces), variants)


def run_comparison(
    corpus: Sequence[Sample],
    policies: Sequence[Policy],
    detector: Detector,
    config: CampaignConfig = CampaignConfig(),
) -> List[CampaignResult]:
    """Campaigns for several methods against one detector; ``report_table`` lays them out."""
    return [run_campaign(corpus, policy, detector, config) for policy in policies]


# ---------------------------------------------------------------------------
# Sequence mining
# ---------------------------------------------------------------------------

class SequenceRow(NamedTuple):
    actions: Tuple[MutationAction, ...]
    count: int

    @property
    def chain(self) -> str:
        return " -> ".join(a.label for a in self.actions)


def mine_sequences(traces: Iterable[EpisodeTrace], max_len: int = 3) -> List[SequenceRow]:
    """Count contiguous action runs of length 2..max_len inside evasive traces.

    Rows are sorted by count, descending, then by action indices.
    """
    if max_len < 1:
        raise ValueError(f"max_len must be at least 1, got {max_len}")
    counts: Counter = Counter()
    for trace in traces:
        if not trace.evaded:
            continue
        actions = tuple(MutationAction(a) for a in trace.actions)
        for length in range(2, max_len + 1):
            for start in range(len(actions) - length + 1):
                counts[actions[start:start + length]] += 1
    ordered = sorted(counts.items(), key=lambda item: (-item[1], tuple(int(a) for a in item[0])))
    return [SequenceRow(actions, count) for actions, count in ordered]


def sequence_table(rows: Sequence[SequenceRow]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "sequence": [row.chain for row in rows],
            "actions": [",".join(a.variant for a in row.actions) for row in rows],
            "count": [row.count for row in rows],
        },
        columns=["sequence", "actions", "count"],
    )


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

ARM_RL_ONLY = "rl-only"
ARM_OBFUSCATION_ONLY = "obf-only"
ARM_FULL = "full"
ABLATION_ARMS: Tuple[str, ...] = (ARM_RL_ONLY, ARM_OBFUSCATION_ONLY, ARM_FULL)

ARM_ACTIONS: Dict[str, Tuple[MutationAction, ...]] = {
    ARM_RL_ONLY: NON_OBFUSCATION_ACTIONS,
    ARM_OBFUSCATION_ONLY: XOR_ACTIONS,
    ARM_FULL: ALL_ACTIONS,
}


@dataclass(frozen=True)
class AblationConfig:
    campaign: CampaignConfig = field(default_factory=CampaignConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    arms: Tuple[str, ...] = ABLATION_ARMS
    obfuscation_includes_packer: bool = False


def arm_policy(
    arm: str,
    config: AblationConfig,
    detector: Detector,
    train_corpus: Sequence[Sample],
    nets: Mapping[str, QNetwork],
) -> Policy:
    if arm == ARM_OBFUSCATION_ONLY:
        packer = (MutationAction.UPX_PACK,) if config.obfuscation_includes_packer else ()
        return ObfuscationOnlyPolicy(XOR_ACTIONS + packer, policy_id=arm)
    if arm not in ARM_ACTIONS:
        raise ValueError(f"unknown ablation arm {arm!r}; expected one of {', '.join(ABLATION_ARMS)}")
    allowed = None if arm == ARM_FULL else tuple(int(a) for a in ARM_ACTIONS[arm])
    net = nets.get(arm)
    if net is None:
        logger.info(f"Training the {arm} agent over {len(ARM_ACTIONS[arm])} actions")
        episode_config = config.campaign.episode_config(config.train.seed)
        train_config = replace(config.train, allowed_actions=allowed)
        net = train_agent(
            lambda: AttackEnv(detector, episode_config, config.campaign.action_config), train_corpus, train_config
        ).net
    return DqnPolicy(net, allowed, arm)


def run_ablation(
    corpus: Sequence[Sample],
    detector: Detector,
    config: AblationConfig = AblationConfig(),
    nets: Optional[Mapping[str, QNetwork]] = None,
    train_corpus: Optional[Sequence[Sample]] = None,
) -> Dict[str, EvasionReport]:
    """Paired campaigns for the three arms, keyed by arm name.

    Learning arms use the matching network from ``nets`` or are trained on
    ``train_corpus`` (default ``corpus``). Every arm sees the same samples in
    the same order with the same per-sample seeds and budget.
    """
    nets = nets or {}
    train_corpus = corpus if train_corpus is None else train_corpus
    reports: Dict[str, EvasionReport] = {}
    for arm in config.arms:
        policy = arm_policy(arm, config, detector, train_corpus, nets)
        reports[arm] = run_campaign(corpus, policy, detector, config.campaign).report
    return reports


# ---------------------------------------------------------------------------
# Transferability
# ---------------------------------------------------------------------------

TRANSFER_COLUMNS = [
    "eval_detector",
    "scanned",
    "baseline_evaded",
    "crafted_evaded",
    "baseline_rate",
    "crafted_rate",
    "scan_failures",
]


@dataclass(frozen=True)
class TransferResult:
    campaign: CampaignResult
    matrix: pd.DataFrame
    failures: Tuple[Tuple[str, str, str], ...] = ()


def _evades(detector: Detector, data: bytes) -> bool:
    return detector.score(data).label is Label.BENIGN


def run_transfer(
    corpus: Sequence[Sample],
    attack_detector: Detector,
    eval_detectors: Sequence[Detector],
    policy: Policy,
    config: CampaignConfig = CampaignConfig(),
) -> TransferResult:
    """Craft variants against ``attack_detector``, then rescan them elsewhere.

    Each eval detector scans the unmodified original (baseline) and the final
    artifact (crafted) of every attacked sample. These scans are outside any
    query budget. A sample whose scan fails is recorded in ``failures`` and
    left out of that detector's row.
    """
    if not eval_detectors:
        raise ValueError("transfer needs at least one evaluation detector")
    campaign = run_campaign(corpus, policy, attack_detector, replace(config, keep_variants=True))
    originals = {s.sample_id: s.data for s in corpus}

    rows = []
    failures: List[Tuple[str, str, str]] = []
    for detector in eval_detectors:
        detector_id = getattr(detector, "detector_id", type(detector).__name__)
        if detector is attack_detector:
            logger.warning(f"Evaluation detector {detector_id} is the attack detector")
        scanned = baseline = crafted = 0
        for trace in campaign.traces:
            try:
                base_evades = _evades(detector, originals[trace.sample_id])
                crafted_evades = _evades(detector, campaign.variants[trace.sample_id])
            except ScanFailed as e:
                logger.warning(f"{detector_id} failed on {trace.sample_id}: {e}")
                failures.append((detector_id, trace.sample_id, str(e)))
                continue
            scanned += 1
            baseline += base_evades
            crafted += crafted_evades
        rows.append({
            "eval_detector": detector_id,
            "scanned": scanned,
            "baseline_evaded": baseline,
            "crafted_evaded": crafted,
            "baseline_rate": evasion_rate(baseline, scanned) if scanned else np.nan,
            "crafted_rate": evasion_rate(crafted, scanned) if scanned else np.nan,
            "scan_failures": sum(1 for f in failures if f[0] == detector_id),
        })
    return TransferResult(campaign, pd.DataFrame(rows, columns=TRANSFER_COLUMNS), tuple(failures))


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------

def trace_record(trace: EpisodeTrace) -> Dict[str, Any]:
    return {
        "record": "episode",
        "sample_id": trace.sample_id,
        "category": trace.category,
        "actions": [MutationAction(a).variant for a in trace.actions],
        "verdicts": [Label(v).value for v in trace.verdicts],
        "evaded": bool(trace.evaded),
        "queries": int(trace.queries_used),
        "final_digest": trace.final_digest,
        "structurally_valid": bool(trace.structurally_valid),
        "seed": int(trace.seed),
        "degraded_steps": [int(i) for i in trace.degraded_steps],
    }


def write_traces(traces: Sequence[EpisodeTrace], path: Union[str, Path], flags: Mapping[str, Any]) -> None:
    """JSON lines: a ``header`` record with the flag set, then one ``episode`` record per trace."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = json.dumps({"record": "header", "flags": dict(flags)}, sort_keys=True, default=str) + "\n"
    if traces:
        frame = pd.DataFrame([trace_record(t) for t in traces])
        lines += frame.to_json(orient="records", lines=True).rstrip("\n") + "\n"
    with open(path, "w", newline="") as handle:
        handle.write(lines)


def read_traces(path: Union[str, Path]) -> Tuple[Dict[str, Any], List[EpisodeTrace]]:
    with open(path) as handle:
        text = handle.read()
    header_line, _, rest = text.partition("\n")
    header = json.loads(header_line) if header_line else {}
    flags = header.get("flags", {}) if header.get("record") == "header" else {}
    if header.get("record") != "header":
        rest = text
    if not rest.strip():
        return flags, []
    frame = pd.read_json(io.StringIO(rest), orient="records", lines=True, dtype=False, convert_dates=False)
    traces = [
        EpisodeTrace(
            sample_id=str(row["sample_id"]),
            category=str(row["category"]),
            actions=tuple(action_from_name(a) for a in row["actions"]),
            verdicts=tuple(Label(v) for v in row["verdicts"]),
            evaded=bool(row["evaded"]),
            queries_used=int(row["queries"]),
            final_digest=str(row["final_digest"]),
            structurally_valid=bool(row["structurally_valid"]),
            seed=int(row["seed"]),
            degraded_steps=tuple(int(i) for i in row["degraded_steps"]),
        )
        for row in frame.to_dict(orient="records")
        if row.get("record", "episode") == "episode"
    ]
    return flags, traces


def write_report(
    reports: Sequence[EvasionReport],
    path: Union[str, Path],
    flags: Mapping[str, Any],
    row_names: Optional[Sequence[str]] = None,
) -> Path:
    """Rate table as CSV at ``path`` plus the full counts as ``<path>.json``; returns the JSON path."""
    path = Path(path)
    write_flagged_csv(report_table(reports, row_names), path, dict(flags))
    names = list(row_names) if row_names is not None else [r.policy_id for r in reports]
    summary_path = path.with_suffix(".json")
    summary = {
        "flags": dict(flags),
        "reports": [{"method": n, **r.summary()} for n, r in zip(names, reports)],
    }
    summary_path.write_text(json.dumps(summary, sort_keys=True, indent=2, default=str) + "\n")
    return summary_path


def write_variants(result: CampaignResult, directory: Union[str, Path]) -> List[Path]:
    """Write the final artifact of every evasive episode as ``<sample_id>.<digest prefix>.bin``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for trace in result.traces:
        data = result.variants.get(trace.sample_id)
        if not trace.evaded or data is None:
            continue
        target = directory / f"{trace.sample_id}.{trace.final_digest[:12]}.bin"
        target.write_bytes(data)
        written.append(target)
    logger.info(f"Wrote {len(written)} evasive variants to {directory}")
    return written
