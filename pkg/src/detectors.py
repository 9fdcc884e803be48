"""Black-box detectors: two trainable surrogates, a signature scanner, and an
exit-code adapter for an external scanner, plus the per-episode query budget.

Checkpoint layout ("OBFD1", little-endian)::

    magic        5 bytes  b"OBFD1"
    version      u8       1
    kind         u8       1 bytehist | 2 featboost | 3 sigscan | 4 external
    threshold    f64
    bytehist:    u32 n, n * f64 weights (256 bins, then bias)
    featboost:   f64 learning_rate, u32 n, n * (u32 feature, f64 split, f64 left, f64 right)
    sigscan:     u32 n, n * (u32 len, bytes) patterns; u32 m, m * (u32 len, bytes) section names
    external:    f64 timeout, u32 len, utf-8 command
"""

import io
import shlex
import struct
import subprocess
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Tuple, Union, runtime_checkable

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from src.argument_parser import external_scanner_command, logger, scanner_timeout
from src.errors import (
    BadMagic,
    BudgetExhausted,
    CheckpointError,
    DegenerateCorpus,
    PeFormatError,
    ScanFailed,
    VersionMismatch,
)
from src.features import FEATURE_DIM, byte_histogram, feature_matrix
from src.pe_model import parse_pe

CHECKPOINT_MAGIC = b"OBFD1"
CHECKPOINT_VERSION = 1

MALICIOUS = 1
BENIGN = 0


class Label(str, Enum):
    MALICIOUS = "malicious"
    BENIGN = "benign"


@dataclass(frozen=True)
class DetectorVerdict:
    label: Label
    score: float

    @property
    def is_malicious(self) -> bool:
        return self.label is Label.MALICIOUS


def verdict_for(score: float, threshold: float) -> DetectorVerdict:
    """Ties go to malicious."""
    return DetectorVerdict(Label.MALICIOUS if score >= threshold else Label.BENIGN, float(score))


@runtime_checkable
class Detector(Protocol):
    detector_id: str

    def score(self, data: bytes) -> DetectorVerdict:
        ...


class DetectorKind(str, Enum):
    BYTEHIST = "bytehist"
    FEATBOOST = "featboost"
    SIGSCAN = "sigscan"
    EXTERNAL = "external"


_KIND_TAGS = {
    DetectorKind.BYTEHIST: 1,
    DetectorKind.FEATBOOST: 2,
    DetectorKind.SIGSCAN: 3,
    DetectorKind.EXTERNAL: 4,
}


def _check_threshold(threshold: float) -> None:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")


@dataclass(frozen=True, eq=False)
class ByteHistLinear:
    """Logistic model over the normalized byte histogram; ``weights[256]`` is the bias."""

    weights: np.ndarray
    threshold: float = 0.5
    detector_id: str = DetectorKind.BYTEHIST.value

    def __post_init__(self) -> None:
        _check_threshold(self.threshold)
        if self.weights.shape != (257,):
            raise ValueError(f"expected 257 weights, got {self.weights.shape}")

    def probability(self, data: bytes) -> float:
        return float(expit(byte_histogram(data) @ self.weights[:256] + self.weights[256]))

    def score(self, data: bytes) -> DetectorVerdict:
        return verdict_for(self.probability(data), self.threshold)


@dataclass(frozen=True)
class Stump:
    """``x[feature] <= split`` takes ``left``, otherwise ``right``. Leaves are already scaled."""

    feature: int
    split: float
    left: float
    right: float

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.where(features[..., self.feature] <= self.split, self.left, self.right)


@dataclass(frozen=True, eq=False)
class FeatBoost:
    """Boosted depth-1 stumps over ``extract_features``; score = sigmoid(sum of leaves)."""

    stumps: Tuple[Stump, ...]
    learning_rate: float = 0.3
    threshold: float = 0.5
    training_loss: Tuple[float, ...] = field(default=(), repr=False)
    detector_id: str = DetectorKind.FEATBOOST.value

    def __post_init__(self) -> None:
        _check_threshold(self.threshold)
        for stump in self.stumps:
            if not 0 <= stump.feature < FEATURE_DIM:
                raise ValueError(f"stump feature index {stump.feature} out of range")

    def margin(self, features: np.ndarray) -> np.ndarray:
        total = np.zeros(features.shape[:-1])
        for stump in self.stumps:
            total = total + stump.predict(features)
        return total

    def probability(self, data: bytes) -> float:
        return float(expit(self.margin(feature_matrix([data]))[0]))

    def score(self, data: bytes) -> DetectorVerdict:
        return verdict_for(self.probability(data), self.threshold)


DEFAULT_SECTION_RULES: Tuple[bytes, ...] = (b"UPX0",)


@dataclass(frozen=True)
class SigScan:
    """Malicious iff any byte pattern occurs or any section carries a flagged name."""

    patterns: Tuple[bytes, ...] = ()
    section_names: Tuple[bytes, ...] = DEFAULT_SECTION_RULES
    threshold: float = 0.5
    detector_id: str = DetectorKind.SIGSCAN.value

    def matches(self, data: bytes) -> bool:
        if any(pattern and pattern in data for pattern in self.patterns):
            return True
        if not self.section_names:
            return False
        try:
            pe = parse_pe(data)
        except PeFormatError:
            return False
        return any(section.label in self.section_names for section in pe.sections)

    def score(self, data: bytes) -> DetectorVerdict:
        return verdict_for(1.0 if self.matches(data) else 0.0, self.threshold)


@dataclass(frozen=True)
class ExternalScanner:
    """Exit-code adapter: the command gets ``{input}``; exit 0 is clean, exit 1 is a detection."""

    command: str
    timeout: float = 60.0
    threshold: float = 0.5
    detector_id: str = DetectorKind.EXTERNAL.value

    def score(self, data: bytes) -> DetectorVerdict:
        with tempfile.TemporaryDirectory(prefix="testbed-scan-") as tmp:
            sample = Path(tmp) / "sample.bin"
            sample.write_bytes(data)
            cmd = [part.format(input=sample) for part in shlex.split(self.command)]
            try:
                result = subprocess.run(cmd, capture_output=True, text=True, timeout=self.timeout)
            except subprocess.TimeoutExpired as e:
                raise ScanFailed(f"scanner timed out after {self.timeout}s") from e
            except OSError as e:
                raise ScanFailed(f"scanner could not run: {e}") from e
        if result.returncode == 0:
            return verdict_for(0.0, self.threshold)
        if result.returncode == 1:
            return verdict_for(1.0, self.threshold)
        raise ScanFailed(f"scanner exited {result.returncode}: {result.stderr.strip()[:200]}")


DetectorModel = Union[ByteHistLinear, FeatBoost, SigScan, ExternalScanner]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

# Bytes planted in every malicious-proxy corpus file; the default SigScan rule.
PLANTED_MARKER = b"TESTBED-PROXY-MARKER\xde\xad\xbe\xef"


@dataclass(frozen=True)
class DetectorTrainConfig:
    seed: int = 0
    threshold: float = 0.5
    l2: float = 1e-4
    max_iter: int = 500
    rounds: int = 40
    learning_rate: float = 0.3
    reg_lambda: float = 1.0
    max_candidates: int = 64
    patterns: Tuple[bytes, ...] = (PLANTED_MARKER,)
    section_names: Tuple[bytes, ...] = DEFAULT_SECTION_RULES
    scanner_command: Optional[str] = None


LabeledCorpus = Sequence[Tuple[bytes, int]]


def _labels(corpus: LabeledCorpus) -> np.ndarray:
    y = np.asarray([int(label) for _, label in corpus], dtype=np.float64)
    if y.size == 0 or np.all(y == y[0]):
        raise DegenerateCorpus("training corpus needs both malicious and benign samples")
    return y


def fit_bytehist(X: np.ndarray, y: np.ndarray, config: DetectorTrainConfig) -> ByteHistLinear:
    """L2-regularized logistic regression on histogram rows.

    The weights are fitted with scipy's L-BFGS-B, a quasi-Newton method, not
    with fixed-step gradient descent. It is handed the same analytic gradient and
    converges in far fewer passes over the corpus.
    """
    n = X.shape[0]
    design = np.hstack([X, np.ones((n, 1))])

    def objective(w: np.ndarray) -> Tuple[float, np.ndarray]:
        z = design @ w
        loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * config.l2 * np.sum(w[:256] ** 2)
        grad = design.T @ (expit(z) - y) / n
        grad[:256] += config.l2 * w[:256]
        return float(loss), grad

    result = minimize(
        objective, np.zeros(257), jac=True, method="L-BFGS-B", options={"maxiter": config.max_iter}
    )
    logger.debug(f"ByteHistLinear fit: loss {result.fun:.6f} after {result.nit} iterations")
    return ByteHistLinear(np.asarray(result.x, dtype=np.float64), config.threshold)


def logistic_loss(margin: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, margin) - y * margin))


def candidate_splits(column: np.ndarray, max_candidates: int) -> np.ndarray:
    """Distinct values of ``column`` except the largest (a split there leaves no right side)."""
    values = np.unique(column)[:-1]
    if values.size > max_candidates:
        picks = np.linspace(0, values.size - 1, max_candidates).round().astype(int)
        values = values[np.unique(picks)]
    return values


def best_stump(
    X: np.ndarray, g: np.ndarray, h: np.ndarray, reg_lambda: float, max_candidates: int
) -> Tuple[float, int, float, float, float]:
    """Highest-gain (feature, split); ties keep the lowest feature, then the lowest split.

    Returns (gain, feature, split, left_weight, right_weight) with unscaled Newton weights.
    """
    G, H = g.sum(), h.sum()
    parent = G * G / (H + reg_lambda)
    best = (0.0, -1, 0.0, 0.0, 0.0)
    for j in range(X.shape[1]):
        column = X[:, j]
        splits = candidate_splits(column, max_candidates)
        if splits.size == 0:
            continue
        left = column[None, :] <= splits[:, None]
        GL = left @ g
        HL = left @ h
        GR, HR = G - GL, H - HL
        gains = GL * GL / (HL + reg_lambda) + GR * GR / (HR + reg_lambda) - parent
        k = int(np.argmax(gains))
        if gains[k] > best[0] + 1e-12:
            best = (
                float(gains[k]), j, float(splits[k]),
                float(-GL[k] / (HL[k] + reg_lambda)), float(-GR[k] / (HR[k] + reg_lambda)),
            )
    return best


def fit_featboost(X: np.ndarray, y: np.ndarray, config: DetectorTrainConfig) -> FeatBoost:
    """Gradient boosting of depth-1 stumps on logistic loss, starting from margin 0.

    A round whose stump would raise the loss is shrunk by halving until it does
    not; boosting stops when no split has positive gain.
    """
    margin = np.zeros(X.shape[0])
    losses = [logistic_loss(margin, y)]
    stumps: List[Stump] = []
    for round_index in range(config.rounds):
        p = expit(margin)
        g = p - y
        h = p * (1.0 - p)
        gain, feature, split, left, right = best_stump(X, g, h, config.reg_lambda, config.max_candidates)
        if feature < 0:
            logger.debug(f"FeatBoost: no positive-gain split at round {round_index}, stopping")
            break
        scale = config.learning_rate
        for _ in range(30):
            stump = Stump(feature, split, left * scale, right * scale)
            candidate = margin + stump.predict(X)
            loss = logistic_loss(candidate, y)
            if loss <= losses[-1]:
                break
            scale /= 2.0
        else:
            break
        stumps.append(stump)
        margin = candidate
        losses.append(loss)
    logger.debug(f"FeatBoost: {len(stumps)} stumps, loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    return FeatBoost(tuple(stumps), config.learning_rate, config.threshold, tuple(losses))


def train_detector(
    kind: Union[DetectorKind, str],
    corpus: LabeledCorpus,
    config: DetectorTrainConfig = DetectorTrainConfig(),
) -> DetectorModel:
    """Train (or configure) a detector of ``kind`` on ``(bytes, label)`` pairs.

    Raises:
        DegenerateCorpus: the corpus holds a single class (trainable kinds only)
    """
    kind = DetectorKind(kind)
    if kind is DetectorKind.SIGSCAN:
        return SigScan(tuple(config.patterns), tuple(config.section_names), config.threshold)
    if kind is DetectorKind.EXTERNAL:
        command = config.scanner_command or external_scanner_command()
        if not command:
            raise ValueError("external detector needs EXTERNAL_SCANNER_CMD or an explicit command")
        return ExternalScanner(command, scanner_timeout(), config.threshold)

    y = _labels(corpus)
    data = [sample for sample, _ in corpus]
    logger.info(f"Training {kind.value} detector on {len(data)} samples ({int(y.sum())} malicious)")
    if kind is DetectorKind.BYTEHIST:
        return fit_bytehist(np.vstack([byte_histogram(d) for d in data]), y, config)
    return fit_featboost(feature_matrix(data), y, config)


# ---------------------------------------------------------------------------
# Evaluation and budget
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectorEvaluation:
    true_positive: int
    false_positive: int
    true_negative: int
    false_negative: int

    @property
    def total(self) -> int:
        return self.true_positive + self.false_positive + self.true_negative + self.false_negative

    @property
    def accuracy(self) -> float:
        return (self.true_positive + self.true_negative) / self.total if self.total else 0.0


def evaluate_detector(model: Detector, corpus: LabeledCorpus) -> DetectorEvaluation:
    tp = fp = tn = fn = 0
    for data, label in corpus:
        flagged = model.score(data).is_malicious
        if label == MALICIOUS:
            tp += flagged
            fn += not flagged
        else:
            fp += flagged
            tn += not flagged
    return DetectorEvaluation(tp, fp, tn, fn)


@dataclass
class QueryBudget:
    """Single-owner per-episode counter; ``used`` never exceeds ``limit``."""

    limit: int = 5
    used: int = 0

    @property
    def remaining(self) -> int:
        return self.limit - self.used

    @property
    def exhausted(self) -> bool:
        return self.used >= self.limit


def budget_query(budget: QueryBudget, model: Detector, data: bytes) -> DetectorVerdict:
    """Spend one query on ``model``.

    Raises:
        BudgetExhausted: ``budget`` is already used up; the detector is not queried
    """
    if budget.exhausted:
        raise BudgetExhausted(f"query budget of {budget.limit} exhausted")
    budget.used += 1
    return model.score(data)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _write_blob(buf: io.BytesIO, blob: bytes) -> None:
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)


def detector_to_bytes(model: DetectorModel) -> bytes:
    kind = DetectorKind(model.detector_id)
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<BBd", CHECKPOINT_VERSION, _KIND_TAGS[kind], model.threshold))
    if isinstance(model, ByteHistLinear):
        buf.write(struct.pack("<I", model.weights.size))
        buf.write(model.weights.astype("<f8").tobytes())
    elif isinstance(model, FeatBoost):
        buf.write(struct.pack("<dI", model.learning_rate, len(model.stumps)))
        for stump in model.stumps:
            buf.write(struct.pack("<Iddd", stump.feature, stump.split, stump.left, stump.right))
    elif isinstance(model, SigScan):
        buf.write(struct.pack("<I", len(model.patterns)))
        for pattern in model.patterns:
            _write_blob(buf, pattern)
        buf.write(struct.pack("<I", len(model.section_names)))
        for name in model.section_names:
            _write_blob(buf, name)
    else:
        buf.write(struct.pack("<d", model.timeout))
        _write_blob(buf, model.command.encode("utf-8"))
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def unpack(self, fmt: str) -> Tuple:
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.data):
            raise CheckpointError(f"checkpoint truncated at byte {self.offset}")
        values = struct.unpack_from(fmt, self.data, self.offset)
        self.offset += size
        return values

    def blob(self) -> bytes:
        (length,) = self.unpack("<I")
        if self.offset + length > len(self.data):
            raise CheckpointError(f"checkpoint truncated at byte {self.offset}")
        out = self.data[self.offset:self.offset + length]
        self.offset += length
        return out


def detector_from_bytes(data: bytes) -> DetectorModel:
    """Inverse of ``detector_to_bytes``.

    Raises:
        BadMagic: not an OBFD1 checkpoint
        VersionMismatch: unsupported version or kind tag
        CheckpointError: truncated or inconsistent payload
    """
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise BadMagic("not a detector checkpoint")
    reader = _Reader(data)
    reader.offset = len(CHECKPOINT_MAGIC)
    version, tag, threshold = reader.unpack("<BBd")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"detector checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    kinds = {v: k for k, v in _KIND_TAGS.items()}
    if tag not in kinds:
        raise VersionMismatch(f"unknown detector kind tag {tag}")
    kind = kinds[tag]

    try:
        if kind is DetectorKind.BYTEHIST:
            (n,) = reader.unpack("<I")
            weights = np.asarray(reader.unpack(f"<{n}d"), dtype=np.float64)
            return ByteHistLinear(weights, threshold)
        if kind is DetectorKind.FEATBOOST:
            learning_rate, n = reader.unpack("<dI")
            stumps = tuple(Stump(*reader.unpack("<Iddd")) for _ in range(n))
            return FeatBoost(stumps, learning_rate, threshold)
        if kind is DetectorKind.SIGSCAN:
            (n,) = reader.unpack("<I")
            patterns = tuple(reader.blob() for _ in range(n))
            (m,) = reader.unpack("<I")
            names = tuple(reader.blob() for _ in range(m))
            return SigScan(patterns, names, threshold)
        (timeout,) = reader.unpack("<d")
        return ExternalScanner(reader.blob().decode("utf-8"), timeout, threshold)
    except CheckpointError:
        raise
    except ValueError as e:
        raise CheckpointError(f"inconsistent detector checkpoint: {e}") from e


def save_detector(model: DetectorModel, path: Union[str, Path]) -> None:
    Path(path).write_bytes(detector_to_bytes(model))
    logger.info(f"Saved {model.detector_id} detector to {path}")


def load_detector(path: Union[str, Path]) -> DetectorModel:
    return detector_from_bytes(Path(path).read_bytes())
