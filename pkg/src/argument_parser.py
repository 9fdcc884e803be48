import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import pandas as pd


@dataclass(frozen=True)
class RunConfig:
    """Resolved settings for one CLI invocation.

    Every command echoes ``flags()`` into the header of what it writes, so a
    report can always be traced back to the exact invocation that produced it.
    """

    seed: int = 0
    corpus: Optional[Path] = None
    models: Path = Path("models")
    reports: Path = Path("reports")
    detector: str = "featboost"
    threshold: float = 0.5
    query_limit: int = 5
    episodes: int = 2000
    policies: Tuple[str, ...] = ("dqn",)
    jobs: int = 1
    extra: Dict[str, Any] = field(default_factory=dict)

    def flags(self) -> Dict[str, Any]:
        out = asdict(self)
        extra = out.pop("extra")
        out.update(extra)
        return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(out.items())}

    def flags_json(self) -> str:
        return json.dumps(self.flags(), sort_keys=True, default=str)


def external_scanner_command() -> Optional[str]:
    return os.environ.get("EXTERNAL_SCANNER_CMD") or None


def packer_command() -> Optional[str]:
    return os.environ.get("PACKER_CMD") or None


def scanner_timeout() -> float:
    return float(os.environ.get("TESTBED_SCANNER_TIMEOUT", "60"))


FLAGS_PREFIX = "# flags: "


def write_flagged_csv(df: pd.DataFrame, path: Union[str, Path], flags: Dict[str, Any]) -> None:
    """Write ``df`` as CSV with the resolved flag set as a ``# flags:`` first line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        handle.write(FLAGS_PREFIX + json.dumps(flags, sort_keys=True, default=str) + "\n")
        df.to_csv(handle, index=False, lineterminator="\n")


def read_flagged_csv(path: Union[str, Path]) -> Tuple[Dict[str, Any], pd.DataFrame]:
    with open(path) as handle:
        first = handle.readline()
        if first.startswith(FLAGS_PREFIX):
            flags = json.loads(first[len(FLAGS_PREFIX):])
        else:
            flags = {}
            handle.seek(0)
        return flags, pd.read_csv(handle)


def write_flags_sidecar(path: Union[str, Path], flags: Dict[str, Any]) -> Path:
    sidecar = Path(str(path) + ".flags.json")
    sidecar.write_text(json.dumps(flags, sort_keys=True, indent=2, default=str) + "\n")
    return sidecar


DEBUG_LOG_FILE = "debug_log.txt"
_OWN_HANDLER = "_testbed_handler"


# Configure the logging settings
def configure_logging(
    debug_flag: bool, verbose_flag: bool, log_file: Optional[Union[str, Path]] = None
) -> None:
    """Log to stdout; also to ``log_file``, which defaults to ``debug_log.txt`` under ``--debug``.

    Without ``--debug`` or an explicit ``log_file`` no file is created. A second
    call replaces the handlers the first one installed.
    """
    log_level = logging.DEBUG if verbose_flag or debug_flag else logging.INFO
    if log_file is None and debug_flag:
        log_file = DEBUG_LOG_FILE

    root = logging.getLogger()
    for handler in [h for h in root.handlers if getattr(h, _OWN_HANDLER, False)]:
        root.removeHandler(handler)
        handler.close()
    root.setLevel(log_level)

    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))
    formatter = logging.Formatter("%(asctime)s - %(levelname)s - %(message)s")
    for handler in handlers:
        handler.setLevel(log_level)
        handler.setFormatter(formatter)
        setattr(handler, _OWN_HANDLER, True)
        root.addHandler(handler)


logger: logging.Logger = logging.getLogger(__name__)
