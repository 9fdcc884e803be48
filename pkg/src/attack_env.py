import hashlib
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from src.argument_parser import logger
from src.detectors import Detector, DetectorVerdict, Label, QueryBudget, budget_query
from src.errors import (
    ActionInapplicable,
    EpisodeActive,
    EpisodeFinished,
    LayoutConflict,
    PackerFailed,
    SampleNotDetected,
)
from src.features import extract_features
from src.mutation_actions import ActionConfig, MutationAction, apply_action, randomness_source
from src.pe_model import PeBinary, parse_pe, validate_structure


class Sample(NamedTuple):
    """One corpus file as the environment and the harness see it."""

    sample_id: str
    data: bytes
    category: str = ""
    label: int = 1


@dataclass(frozen=True)
class EpisodeConfig:
    """Per-episode rules.

    Attributes:
        query_limit: attack-time detector queries per sample
        reward_on_evasion: reward for the step whose verdict is benign
        reward_otherwise: reward for every other step
        seed: default seed when ``reset`` gets none
        count_confirmation_query: charge the reset-time confirmation query to the budget
    """

    query_limit: int = 5
    reward_on_evasion: float = 10.0
    reward_otherwise: float = 0.0
    seed: int = 0
    count_confirmation_query: bool = False

    def __post_init__(self) -> None:
        if self.query_limit < 1:
            raise ValueError(f"query_limit must be at least 1, got {self.query_limit}")


@dataclass(frozen=True, eq=False)
class EnvState:
    """What the agent sees: features of the current binary, never a detector score."""

    observation: np.ndarray
    steps_taken: int


@dataclass(frozen=True)
class StepInfo:
    label: Label
    action: MutationAction
    byte_length: int
    degraded: bool = False


@dataclass(frozen=True)
class StepResult:
    state: EnvState
    reward: float
    done: bool
    info: StepInfo


@dataclass(frozen=True)
class EpisodeTrace:
    """Full record of one attacked sample."""

    sample_id: str
    category: str
    actions: Tuple[MutationAction, ...]
    verdicts: Tuple[Label, ...]
    evaded: bool
    queries_used: int
    final_digest: str
    structurally_valid: bool = True
    seed: int = 0
    degraded_steps: Tuple[int, ...] = field(default=())


DEGRADING_ERRORS = (ActionInapplicable, LayoutConflict, PackerFailed)


class AttackEnv:
    """Single-sample, label-only attack environment.

    ``reset`` confirms the sample is detected; each ``step`` applies one action
    to the current binary and spends one budgeted query. The episode ends on the
    first benign verdict or when the budget is used up.
    """

    def __init__(
        self,
        detector: Detector,
        config: EpisodeConfig = EpisodeConfig(),
        action_config: Optional[ActionConfig] = None,
    ) -> None:
        self.detector = detector
        self.config = config
        self.action_config = action_config or ActionConfig()
        self.detector_calls = 0
        self._budget = QueryBudget(config.query_limit)
        self._pe: Optional[PeBinary] = None
        self._rng = randomness_source(config.seed)
        self._active = False
        self._done = False
        self._actions: List[MutationAction] = []
        self._verdicts: List[Label] = []
        self._degraded: List[int] = []
        self._evaded = False
        self._sample_id = ""
        self._category = ""
        self._seed = config.seed

    @property
    def queries_used(self) -> int:
        return self._budget.used

    @property
    def done(self) -> bool:
        return self._done

    @property
    def current_bytes(self) -> bytes:
        if self._pe is None:
            raise EpisodeActive("no episode has been started")
        return self._pe.raw

    def _state(self) -> EnvState:
        assert self._pe is not None
        return EnvState(extract_features(self._pe), len(self._actions))

    def _query(self, data: bytes) -> DetectorVerdict:
        self.detector_calls += 1
        return budget_query(self._budget, self.detector, data)

    def reset(
        self,
        sample: bytes,
        seed: Optional[int] = None,
        sample_id: str = "",
        category: str = "",
    ) -> EnvState:
        """Start an episode on ``sample``.

        Raises:
            MalformedHeader: ``sample`` is not a PE file
            SampleNotDetected: the detector already labels ``sample`` benign
        """
        pe = parse_pe(sample)
        self._seed = self.config.seed if seed is None else seed
        self._rng = randomness_source(self._seed)
        self._budget = QueryBudget(self.config.query_limit)
        self.detector_calls = 0
        self._pe = pe
        self._actions, self._verdicts, self._degraded = [], [], []
        self._evaded = False
        self._sample_id, self._category = sample_id, category
        self._active = False
        self._done = False

        if self.config.count_confirmation_query:
            verdict = self._query(pe.raw)
        else:
            self.detector_calls += 1
            verdict = self.detector.score(pe.raw)
        if not verdict.is_malicious:
            raise SampleNotDetected(f"sample {sample_id or '<unnamed>'} is already labeled benign")

        self._active = True
        self._done = self._budget.exhausted
        return self._state()

    def step(self, action: MutationAction) -> StepResult:
        """Apply ``action`` and query the detector once.

        Raises:
            EpisodeFinished: no active episode, or it is already done
        """
        if not self._active or self._done:
            raise EpisodeFinished("episode is finished; call reset first")
        assert self._pe is not None
        action = MutationAction(action)

        degraded = False
        try:
            mutated = apply_action(self._pe, action, self._rng, self.action_config)
        except DEGRADING_ERRORS as e:
            logger.warning(f"{action.variant} degraded to a no-op on {self._sample_id or 'sample'}: {e}")
            mutated = self._pe
            degraded = True
            self._degraded.append(len(self._actions))

        verdict = self._query(mutated.raw)
        self._pe = mutated
        self._actions.append(action)
        self._verdicts.append(verdict.label)

        evaded = not verdict.is_malicious
        self._evaded = evaded
        reward = self.config.reward_on_evasion if evaded else self.config.reward_otherwise
        self._done = evaded or self._budget.exhausted
        logger.debug(
            f"step {len(self._actions)} {action.variant}: {verdict.label.value}, "
            f"{len(mutated.raw)} bytes, done={self._done}"
        )
        return StepResult(
            self._state(), reward, self._done, StepInfo(verdict.label, action, len(mutated.raw), degraded)
        )

    def episode_trace(self) -> EpisodeTrace:
        """Record of the finished episode.

        Raises:
            EpisodeActive: the episode is still running or never started
        """
        if not self._active or not self._done or self._pe is None:
            raise EpisodeActive("episode has not finished")
        return EpisodeTrace(
            sample_id=self._sample_id,
            category=self._category,
            actions=tuple(self._actions),
            verdicts=tuple(self._verdicts),
            evaded=self._evaded,
            queries_used=len(self._actions),
            final_digest=hashlib.sha256(self._pe.raw).hexdigest(),
            structurally_valid=validate_structure(self._pe).is_valid,
            seed=self._seed,
            degraded_steps=tuple(self._degraded),
        )
