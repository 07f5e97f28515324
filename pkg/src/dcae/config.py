"""JSON run configuration with dotted-key overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

from .corpus import CorpusSpec
from .model import ModelConfig
from .net import CodeLayout, UNetMode
from .train import TrainSchedule

TOP_LEVEL = ("out", "corpus_dir", "corpus", "model", "train", "eval", "grad_check")
MODEL_EXTRA = ("r_ratio",)
EVAL_KEYS = ("system",)
GRAD_CHECK_KEYS = ("num_frames", "feat_dim", "spk_dim", "hidden_dim", "bottleneck_dim",
                   "encoder_depth", "decoder1_depth", "decoder2_depth", "subsample_factor",
                   "max_coords")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    out: Path
    corpus: CorpusSpec
    model: dict
    train: TrainSchedule
    corpus_dir: Path | None = None
    eval: dict = field(default_factory=dict)
    grad_check: dict = field(default_factory=dict)

    @property
    def corpus_path(self) -> Path:
        return self.corpus_dir if self.corpus_dir is not None else self.out / "corpus"

    def model_config(self) -> ModelConfig:
        """Model config with input/output sizes filled in from the corpus spec."""
        from .estimator import default_layout

        m = dict(self.model)
        r_ratio = m.pop("r_ratio", 0.5)
        m.setdefault("feat_dim", self.corpus.feat_dim)
        m.setdefault("spk_dim", self.corpus.spk_embed_dim)
        m.setdefault("num_senones", 2 * self.corpus.num_phones)
        kind = m.get("kind", "c_dcae")
        if kind == "hc_dcae":
            m.setdefault("encoder2_depth", 1)
        if "code_layout" not in m:
            m["code_layout"] = default_layout(kind, m.get("hidden_dim", 64), r_ratio)
        try:
            return ModelConfig(**m)
        except TypeError as exc:
            raise ConfigError(f"model: {exc}") from exc


def bundled_config(name: str) -> str:
    return resources.files("dcae.configs").joinpath(f"{name}.json").read_text()


def _parse_json(text: str, source: str) -> dict:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be an object")
    return data


def _set_dotted(data: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {p} is not a section")
    node[parts[-1]] = value


def _check_keys(section: dict, allowed, where: str) -> None:
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def parse_run_config(data: dict, overrides=(), seed: int | None = None) -> RunConfig:
    data = copy.deepcopy(data)
    for a in overrides:
        _set_dotted(data, a)
    if seed is not None:
        for sec in ("corpus", "model", "train"):
            data.setdefault(sec, {})["seed"] = seed
    _check_keys(data, TOP_LEVEL, "config")
    corpus = data.get("corpus", {})
    model = data.get("model", {})
    train = data.get("train", {})
    _check_keys(corpus, [f.name for f in fields(CorpusSpec)], "corpus")
    _check_keys(model, [f.name for f in fields(ModelConfig)] + list(MODEL_EXTRA), "model")
    _check_keys(train, [f.name for f in fields(TrainSchedule)], "train")
    _check_keys(data.get("eval", {}), EVAL_KEYS, "eval")
    _check_keys(data.get("grad_check", {}), GRAD_CHECK_KEYS, "grad_check")
    if isinstance(model.get("code_layout"), dict):
        _check_keys(model["code_layout"], [f.name for f in fields(CodeLayout)], "model.code_layout")
    if isinstance(model.get("unet"), dict):
        _check_keys(model["unet"], [f.name for f in fields(UNetMode)], "model.unet")
    try:
        spec = CorpusSpec(**corpus)
        spec.validate()
        sched = TrainSchedule(**train)
        cfg = RunConfig(Path(data.get("out", "runs/default")), spec, model, sched,
                        Path(data["corpus_dir"]) if data.get("corpus_dir") else None,
                        data.get("eval", {}), data.get("grad_check", {}))
        cfg.model_config()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_run_config(path: str, overrides=(), seed: int | None = None) -> RunConfig:
    """Read a config file; a bare name such as ``smoke`` selects a bundled config."""
    p = Path(path)
    if p.exists():
        text, source = p.read_text(encoding="utf-8"), str(p)
    else:
        try:
            text, source = bundled_config(path), f"<bundled {path}>"
        except (FileNotFoundError, ModuleNotFoundError):
            raise ConfigError(f"config file {path} not found") from None
    return parse_run_config(_parse_json(text, source), overrides, seed)
