"""Run manifests: one JSON document that pins everything a run depends on.

A manifest starts from per-domain defaults, is overlaid with the user's file
(unknown keys are typos and are rejected), validated, and then written back to
the output directory with every default materialized.  The hash of that
resolved document labels every metric row the run emits.
"""
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .reward import REWARD_NAMES

SCHEMA_VERSION = 1
DOMAINS = ("gauss2d", "sprites8")
STAGES = ("data", "codec", "teacher", "distill", "finetune", "eval", "ablate")


class ManifestError(ValueError):
    pass


@dataclass
class ScheduleSpec:
    kind: str = "vp-cosine"
    T: int = 1000
    s: float = 0.008
    alpha_floor: float = 1e-3


@dataclass
class ModelSpec:
    param_kind: str = "conjugate-v"
    hidden: int = 128
    depth: int = 2
    time_dim: int = 32
    class_dim: int = 8


@dataclass
class LatentSpec:
    kind: str = "identity"
    latent_dim: int = 2
    hidden_enc: list = field(default_factory=lambda: [256, 128])
    hidden_dec: list = field(default_factory=lambda: [256, 512])
    mse_budget: float = 0.01


@dataclass
class DistillSpec:
    beta_cd: float = 0.5
    beta_ft: float = 1.0
    w_cd: float = 7.5
    w_vsd: float = 3.5
    fake_ratio: int = 5
    m: int = 1
    grad_mode: str = "one-random-step"
    student_lr: float = 2e-4
    fake_lr: float = 2e-4
    cd_distance: str = "huber"
    cd_delta: float = 0.1
    target_ema: float = 0.0
    batch: int = 8
    snapshot_every: int = 50


@dataclass
class RewardSpec:
    name: str = "brightness"
    mode: str = "lrm"
    lrm_lr: float = 1e-3
    accum: int = 1
    n_trunc: int = 2
    group_size: int = 0  # 0 = no group-mean pooling


@dataclass
class BudgetSpec:
    teacher_iters: int = 20000
    codec_iters: int = 2500
    distill_iters: int = 5000
    finetune_iters: int = 2000
    eval_samples: int = 2048
    finetune_eval_every: int = 25


@dataclass
class AblateSpec:
    steps: list = field(default_factory=lambda: [1, 2, 4])
    m_values: list = field(default_factory=lambda: [1, 5])
    heads: list = field(default_factory=lambda: ["conjugate-v", "x-pred"])
    iters: int = 1000


@dataclass
class RunManifest:
    schema_version: int = SCHEMA_VERSION
    domain: str = "gauss2d"
    seed: int = 0
    out_dir: str = "runs/gauss2d"
    dataset_size: int = 8192
    student_steps: int = 4
    cd_steps: int = 50
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    latent: LatentSpec = field(default_factory=LatentSpec)
    distill: DistillSpec = field(default_factory=DistillSpec)
    reward: RewardSpec = field(default_factory=RewardSpec)
    budgets: BudgetSpec = field(default_factory=BudgetSpec)
    ablate: AblateSpec = field(default_factory=AblateSpec)


_SECTIONS = {
    "schedule": ScheduleSpec,
    "model": ModelSpec,
    "latent": LatentSpec,
    "distill": DistillSpec,
    "reward": RewardSpec,
    "budgets": BudgetSpec,
    "ablate": AblateSpec,
}


def default_manifest(domain):
    if domain not in DOMAINS:
        raise ManifestError(f"domain must be one of {DOMAINS}, got {domain!r}")
    man = RunManifest(domain=domain, out_dir=f"runs/{domain}")
    if domain == "sprites8":
        man.dataset_size = 4096
        man.latent = LatentSpec(kind="trained-ae", latent_dim=16)
        man.model = ModelSpec(hidden=256, depth=2, time_dim=32, class_dim=8)
        man.distill = DistillSpec(batch=4)
        man.reward = RewardSpec(name="brightness")
        man.budgets = BudgetSpec(teacher_iters=30000)
    else:
        man.reward = RewardSpec(name="mode_affinity")
    return man


def _overlay(obj, raw, path):
    if not isinstance(raw, dict):
        raise ManifestError(f"{path or 'manifest'} must be a JSON object")
    known = {f.name for f in dataclasses.fields(obj)}
    for key, value in raw.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            raise ManifestError(f"unknown manifest field {where!r}")
        if key in _SECTIONS and not path:
            _overlay(getattr(obj, key), value, where)
        else:
            setattr(obj, key, value)
    return obj


def _require(cond, msg):
    if not cond:
        raise ManifestError(msg)


def _num(man, section, name, kind=float, low=None):
    holder = getattr(man, section) if section else man
    value = getattr(holder, name)
    where = f"{section}.{name}" if section else name
    if kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
        _require(ok, f"{where} must be an integer")
    else:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        _require(ok, f"{where} must be a number")
    if low is not None:
        _require(value >= low, f"{where} must be >= {low}")
    return value


def validate_manifest(man):
    _require(man.schema_version == SCHEMA_VERSION,
             f"schema_version must be {SCHEMA_VERSION}, got {man.schema_version!r}")
    _require(man.domain in DOMAINS,
             f"domain must be one of {DOMAINS}, got {man.domain!r}")
    _num(man, None, "seed", int, 0)
    _num(man, None, "dataset_size", int, 8)
    _require(isinstance(man.out_dir, str) and man.out_dir,
             "out_dir must be a non-empty string")

    _require(man.schedule.kind in ("vp-cosine", "rectified-flow"),
             f"schedule.kind must be vp-cosine or rectified-flow, got {man.schedule.kind!r}")
    T = _num(man, "schedule", "T", int, 2)
    for steps_name in ("student_steps", "cd_steps"):
        n = _num(man, None, steps_name, int, 1)
        _require(T % n == 0, f"{steps_name} must divide schedule.T ({n} vs {T})")
    _require(man.cd_steps >= man.distill.m + 1,
             "cd_steps must exceed distill.m (need at least one segment)")

    _require(man.model.param_kind in ("conjugate-v", "standard-v"),
             f"model.param_kind must be conjugate-v or standard-v, got "
             f"{man.model.param_kind!r}")
    for f_ in ("hidden", "depth", "time_dim", "class_dim"):
        _num(man, "model", f_, int, 1)
    _require(man.model.time_dim % 2 == 0, "model.time_dim must be even")

    _require(man.latent.kind in ("identity", "trained-ae"),
             f"latent.kind must be identity or trained-ae, got {man.latent.kind!r}")
    _num(man, "latent", "latent_dim", int, 1)
    if man.domain == "gauss2d":
        _require(man.latent.kind == "identity",
                 "gauss2d runs use the identity latent (data is already 2-D)")
        _require(man.latent.latent_dim == 2, "latent.latent_dim must be 2 for gauss2d")
    elif man.latent.kind == "identity":
        _require(man.latent.latent_dim == 64,
                 "identity latent on sprites8 must use latent_dim 64 (8x8 pixels)")

    _require(man.distill.grad_mode in ("none", "last-step", "one-random-step"),
             f"distill.grad_mode unknown: {man.distill.grad_mode!r}")
    _require(man.distill.cd_distance in ("huber", "mse"),
             f"distill.cd_distance must be huber or mse")
    _num(man, "distill", "fake_ratio", int, 1)
    _num(man, "distill", "m", int, 1)
    _num(man, "distill", "batch", int, 1)
    _num(man, "distill", "snapshot_every", int, 1)
    for f_ in ("beta_cd", "beta_ft", "w_cd", "w_vsd", "target_ema",
               "cd_delta", "student_lr", "fake_lr"):
        _num(man, "distill", f_, float, 0)

    _require(man.reward.name in REWARD_NAMES,
             f"reward.name must be one of {REWARD_NAMES}, got {man.reward.name!r}")
    _require(man.reward.mode in ("lrm", "ddpo"),
             f"reward.mode must be lrm or ddpo, got {man.reward.mode!r}")
    _num(man, "reward", "accum", int, 1)
    _num(man, "reward", "n_trunc", int, 1)
    _num(man, "reward", "group_size", int, 0)
    _require(man.reward.n_trunc <= man.student_steps,
             "reward.n_trunc cannot exceed student_steps")

    for f_ in ("teacher_iters", "codec_iters", "distill_iters",
               "finetune_iters", "eval_samples"):
        _num(man, "budgets", f_, int, 1)
    _num(man, "budgets", "finetune_eval_every", int, 1)
    _require(man.budgets.eval_samples % 8 == 0,
             "budgets.eval_samples must be a multiple of the class count (8)")

    for name, allowed in (("steps", None), ("m_values", None), ("heads",
                          ("conjugate-v", "standard-v", "x-pred"))):
        values = getattr(man.ablate, name)
        _require(isinstance(values, list) and values,
                 f"ablate.{name} must be a non-empty list")
        for v in values:
            if allowed is None:
                _require(isinstance(v, int) and v >= 1,
                         f"ablate.{name} entries must be positive integers")
                if name == "steps":
                    _require(T % v == 0, f"ablate.steps entry {v} must divide schedule.T")
            else:
                _require(v in allowed, f"ablate.heads entry unknown: {v!r}")
    _num(man, "ablate", "iters", int, 1)
    return man


def resolve_manifest(raw):
    """Defaults for the named domain overlaid with the user document."""
    if not isinstance(raw, dict):
        raise ManifestError("manifest must be a JSON object")
    domain = raw.get("domain")
    if domain is None:
        raise ManifestError("manifest must name a domain")
    man = _overlay(default_manifest(domain), raw, "")
    return validate_manifest(man)


def load_manifest(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ManifestError(f"manifest file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}")
    return resolve_manifest(raw)


def manifest_to_dict(man):
    return dataclasses.asdict(man)


def save_manifest(man, path):
    with open(path, "w") as fh:
        json.dump(manifest_to_dict(man), fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_hash(man):
    """Identity of the run: every field except where the artifacts land."""
    doc = manifest_to_dict(man)
    doc.pop("out_dir")
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def stage_rng(man, stage, child=None):
    """Independent generator per pipeline stage, derived from the run seed."""
    if stage not in STAGES:
        raise ManifestError(f"unknown stage {stage!r}")
    entropy = [man.seed, STAGES.index(stage)]
    if child is not None:
        entropy.append(child)
    return np.random.default_rng(np.random.SeedSequence(entropy))
