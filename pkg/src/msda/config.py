"""Experiment configuration: a nested YAML file plus dotted ``key=value`` overrides.

Every section maps onto a dataclass, unknown keys are rejected with their full
path, and the resolved (post-override) config is what gets embedded in every
artifact.
"""

from __future__ import annotations

import copy
import dataclasses
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import yaml

from . import __version__
from .augment import SpecAugmentPlan
from .data import SyntheticShift
from .losses import Stage1Coeffs, Stage2Coeffs
from .model import ModelConfig
from .pipeline import METHODS, STUDENT_OBJECTIVES, TEACHER_OBJECTIVES, Stage1Config, Stage2Config


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    shift: SyntheticShift = field(default_factory=SyntheticShift)
    frame_seconds: float = 0.01  # for the hours-equivalent statistic
    root: Optional[str] = None  # corpus directory written by gen-data; synthesized in memory if unset


@dataclass
class ExperimentConfig:
    model: ModelConfig
    data: DataSection
    specaugment: SpecAugmentPlan
    stage1: Stage1Config
    stage2: Stage2Config
    method: str = "MSDA"
    teacher_objective: str = "msda"
    student_objective: str = "standard"
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    setting: str = "synthetic"
    output_dir: str = "runs"

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))


# flat key layout of each section: name -> default
_STAGE1_KEYS = ("alpha", "beta", "lr", "max_epochs", "batch_size", "weight_decay", "diversity_weight", "max_steps")
_STAGE2_KEYS = (
    "gamma", "delta", "student_lr", "teacher_lr", "max_epochs", "batch_size", "weight_decay", "diversity_weight",
    "student_init", "metapl_source_term", "metapl_source_weight", "feedback_baseline", "feedback_baseline_decay",
    "carry_optimizer", "evaluate_initial", "divergence_factor", "divergence_window", "divergence_floor", "max_steps",
)
_TOP_KEYS = ("model", "data", "specaugment", "stage1", "stage2", "method", "teacher_objective", "student_objective",
             "seeds", "setting", "output_dir")


def _to_plain(x):
    if isinstance(x, dict):
        return {k: _to_plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_to_plain(v) for v in x]
    return x


def default_dict() -> dict:
    """The full default config as nested plain data."""
    s1, s2 = Stage1Config(), Stage2Config()
    shift = dataclasses.asdict(SyntheticShift())
    model = ModelConfig().to_dict()
    model["vocab_size"] = None  # derived from data.shift.num_words
    model["input_channels"] = None  # derived from data.shift.channels
    return _to_plain({
        "model": model,
        "data": {"shift": shift, "frame_seconds": 0.01, "root": None},
        "specaugment": dataclasses.asdict(SpecAugmentPlan()),
        "stage1": {"alpha": s1.coeffs.alpha, "beta": s1.coeffs.beta,
                   **{k: getattr(s1, k) for k in _STAGE1_KEYS if k not in ("alpha", "beta")}},
        "stage2": {"gamma": s2.coeffs.gamma, "delta": s2.coeffs.delta,
                   **{k: getattr(s2, k) for k in _STAGE2_KEYS if k not in ("gamma", "delta")}},
        "method": "MSDA",
        "teacher_objective": "msda",
        "student_objective": "standard",
        "seeds": [0, 1, 2],
        "setting": "synthetic",
        "output_dir": "runs",
    })


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{where}' must be a section (mapping), got {value!r}")
            out[key] = _merge(out[key], value, where + ".")
        else:
            out[key] = value
    return out


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key.path=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {key}: cannot parse value {raw!r} ({exc})") from None
    return key, value


def apply_overrides(tree: dict, overrides: Sequence[str]) -> dict:
    tree = copy.deepcopy(tree)
    for text in overrides:
        key, value = parse_override(text)
        node = tree
        parts = key.split(".")
        for i, part in enumerate(parts[:-1]):
            if not isinstance(node, dict) or part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key '{'.'.join(parts[: i + 1])}' in override {text!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key '{key}' in override {text!r}")
        if isinstance(node[parts[-1]], dict):
            raise ConfigError(f"override {text!r} targets a whole section")
        node[parts[-1]] = value
    return tree


def _typed(section: str, cls, values: dict):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def build(tree: dict) -> ExperimentConfig:
    """Validate a nested config tree and turn it into typed sections."""
    tree = _merge(default_dict(), tree)
    try:
        shift_d = dict(tree["data"]["shift"])
        for k in ("frames_per_token", "sentence_length"):
            shift_d[k] = tuple(shift_d[k])
        shift = _typed("data.shift", SyntheticShift, shift_d)
        if shift.num_words < 1 or shift.channels < 1 or shift.num_utterances < 1:
            raise ConfigError("data.shift: num_words, channels and num_utterances must be >= 1")
        data = DataSection(shift, float(tree["data"]["frame_seconds"]), tree["data"]["root"])

        model_d = dict(tree["model"])
        vocab = shift.num_words + 1
        if model_d["vocab_size"] is None:
            model_d["vocab_size"] = vocab
        elif model_d["vocab_size"] != vocab:
            raise ConfigError(f"model.vocab_size={model_d['vocab_size']} does not match data.shift.num_words+1={vocab}")
        if model_d["input_channels"] is None:
            model_d["input_channels"] = shift.channels
        elif model_d["input_channels"] != shift.channels:
            raise ConfigError(f"model.input_channels={model_d['input_channels']} != data.shift.channels={shift.channels}")
        model = _typed("model", ModelConfig, model_d)
        plan = _typed("specaugment", SpecAugmentPlan, tree["specaugment"])

        s1d = dict(tree["stage1"])
        s1 = _typed("stage1", Stage1Config, {
            "coeffs": _typed("stage1", Stage1Coeffs, {"alpha": s1d.pop("alpha"), "beta": s1d.pop("beta")}),
            "specaugment": plan, **s1d})
        s1.validate()
        s2d = dict(tree["stage2"])
        s2 = _typed("stage2", Stage2Config, {
            "coeffs": _typed("stage2", Stage2Coeffs, {"gamma": s2d.pop("gamma"), "delta": s2d.pop("delta")}),
            "specaugment": plan, **s2d})
        s2.validate()
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None

    if tree["method"] not in METHODS:
        raise ConfigError(f"method must be one of {', '.join(METHODS)}, got {tree['method']!r}")
    if tree["teacher_objective"] not in TEACHER_OBJECTIVES:
        raise ConfigError(f"teacher_objective must be one of {TEACHER_OBJECTIVES}, got {tree['teacher_objective']!r}")
    if tree["student_objective"] not in STUDENT_OBJECTIVES:
        raise ConfigError(f"student_objective must be one of {STUDENT_OBJECTIVES}, got {tree['student_objective']!r}")
    seeds = tree["seeds"]
    if isinstance(seeds, int):
        seeds = [seeds]
    if not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError(f"seeds must be a non-empty list of non-negative integers, got {seeds!r}")
    return ExperimentConfig(model, data, plan, s1, s2, tree["method"], tree["teacher_objective"],
                            tree["student_objective"], list(seeds), str(tree["setting"]), str(tree["output_dir"]))


def load(path: Optional[Path], overrides: Sequence[str] = ()) -> tuple[ExperimentConfig, dict]:
    """Parse, merge over defaults, apply overrides, validate. Returns (config, resolved tree)."""
    tree: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            tree = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from None
        if not isinstance(tree, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    resolved = apply_overrides(_merge(default_dict(), tree), overrides)
    cfg = build(resolved)
    # echo derived values back into the tree so artifacts show what actually ran
    resolved["model"]["vocab_size"] = cfg.model.vocab_size
    resolved["model"]["input_channels"] = cfg.model.input_channels
    return cfg, resolved


# overrides that make no sense for a method
_FORBIDDEN = {
    "FT": ("stage1.alpha", "stage1.beta", "stage2."),
    "CPT": ("stage1.alpha", "stage1.beta", "stage2."),
    "M2DS2": ("stage2.",),
    "FT_MP": ("stage1.alpha", "stage1.beta", "stage2.gamma", "stage2.delta"),
    "M2DS2_MP": ("stage2.gamma", "stage2.delta"),
    "MSDA": (),
}


def check_method_overrides(method: str, overrides: Sequence[str]) -> None:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    for text in overrides:
        key, _ = parse_override(text)
        for prefix in _FORBIDDEN[method]:
            if key == prefix or (prefix.endswith(".") and key.startswith(prefix)):
                raise ConfigError(f"override '{key}' does not apply to method {method}")


def version_string() -> str:
    """git-describe of the source tree when available, else the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"], cwd=here, capture_output=True, text=True, timeout=5
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def provenance(resolved: dict) -> dict:
    return {"version": version_string(), "config": resolved}


def dump_yaml(tree: dict) -> str:
    return yaml.safe_dump(tree, sort_keys=True)
