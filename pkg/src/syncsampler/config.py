"""Run configuration: task defaults, presets, config files and flag overrides.

Resolution order, later entries winning: task defaults, the file's preset,
the file's explicit values, the flag preset, explicit flags.  The resolved
configuration serializes to canonical JSON that reproduces the same run
when fed back as ``--config``.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field

from .errors import InvalidConfiguration
from .samplers import SamplerConfig

TASKS = ("panorama", "inpaint", "ring", "divergence", "ablation")
EMIT_FLAGS = ("images", "csv", "trace")

TASK_SAMPLER = {
    "panorama": {},
    "ring": {},
    "ablation": {},
    "divergence": {"algorithm": "reverse", "t_start": 1000, "t_stop": 0},
    "inpaint": {"t_start": 1000, "t_stop": 0, "n_outer_steps": 50, "inner_steps": 50},
}

TASK_PARAMS = {
    "panorama": {"height": 32, "view_size": 8, "n_views": 5, "solver": "splat",
                 "denoiser_url": None},
    "ring": {"n": 16, "w": 4},
    "inpaint": {"n_seeds": 100, "probe_steps": 20, "mask": None},
    "divergence": {"counts": [10, 100, 1000, 10000], "n_chains": 200},
    "ablation": {"n_seeds": 20, "height": 32, "view_size": 8, "n_views": 5},
}

PRESETS = {
    "paper-default": {
        "sampler": {"t_start": 900, "t_stop": 270, "n_outer_steps": 25, "inner_steps": 50,
                    "inner_decay": True, "blend_last_k": 2},
        "params": {"n_views": 5},
    },
    "fast": {"sampler": {"t_start": 900, "t_stop": 700, "n_outer_steps": 8}},
    "toy": {"sampler": {"n_outer_steps": 10, "inner_steps": 10}},
}


@dataclass
class RunConfig:
    task: str = "panorama"
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    gmm: str = None
    views: str = None
    out_dir: str = "runs"
    seed: int = 0
    emit: tuple = ("images", "csv")
    params: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "task": self.task,
            "sampler": self.sampler.to_dict(),
            "gmm": self.gmm,
            "views": self.views,
            "out_dir": self.out_dir,
            "seed": self.seed,
            "emit": list(self.emit),
            "params": dict(self.params),
        }

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def config_hash(self):
        """Hash of everything that affects the results (the output folder does not)."""
        doc = self.to_dict()
        doc.pop("out_dir")
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def validate(self, T=1000):
        if self.task not in TASKS:
            raise InvalidConfiguration(f"unknown task {self.task!r}; choose from {TASKS}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise InvalidConfiguration("seed must be a non-negative integer")
        bad = [e for e in self.emit if e not in EMIT_FLAGS]
        if bad:
            raise InvalidConfiguration(f"unknown emit flags {bad}; choose from {EMIT_FLAGS}")
        unknown = set(self.params) - set(TASK_PARAMS[self.task])
        if unknown:
            raise InvalidConfiguration(f"unknown {self.task} parameters: {sorted(unknown)}")
        self.sampler.validate(T)
        for key in ("gmm", "views"):
            path = getattr(self, key)
            if path is not None and not os.path.isfile(path):
                raise FileNotFoundError(f"{key} file {path!r} does not exist")
        return self


def _merge_sampler(doc, updates):
    unknown = set(updates) - set(SamplerConfig.__dataclass_fields__)
    if unknown:
        raise InvalidConfiguration(f"unknown sampler keys: {sorted(unknown)}")
    doc.update(updates)


def load_config_file(path):
    """Read a JSON config; IO problems surface as ``OSError``, bad content as invalid config."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except ValueError as exc:
        raise InvalidConfiguration(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise InvalidConfiguration(f"{path}: top level must be an object")
    known = set(RunConfig.__dataclass_fields__) | {"preset"}
    unknown = set(doc) - known
    if unknown:
        raise InvalidConfiguration(f"{path}: unknown keys {sorted(unknown)}")
    return doc


def _preset(name):
    if name not in PRESETS:
        raise InvalidConfiguration(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]


def resolve(task=None, file_doc=None, preset=None, sampler_overrides=None,
            param_overrides=None, seed=None, out_dir=None, emit=None, gmm=None, views=None):
    """Combine the configuration layers into a validated :class:`RunConfig`."""
    file_doc = file_doc or {}
    task = task or file_doc.get("task")
    if task is None:
        raise InvalidConfiguration("no task given (use --task or a config file)")
    if task not in TASKS:
        raise InvalidConfiguration(f"unknown task {task!r}; choose from {TASKS}")
    sampler = SamplerConfig().to_dict()
    params = dict(TASK_PARAMS[task])
    _merge_sampler(sampler, TASK_SAMPLER[task])

    # (sampler values, task params, strict); presets may carry params for other tasks
    layers = []
    if file_doc.get("preset"):
        p = _preset(file_doc["preset"])
        layers.append((p.get("sampler", {}), p.get("params", {}), False))
    layers.append((file_doc.get("sampler") or {}, file_doc.get("params") or {}, True))
    if preset:
        p = _preset(preset)
        layers.append((p.get("sampler", {}), p.get("params", {}), False))
    layers.append((sampler_overrides or {}, param_overrides or {}, True))
    for sampler_layer, params_layer, strict in layers:
        _merge_sampler(sampler, sampler_layer)
        for k, v in params_layer.items():
            if k in params:
                params[k] = v
            elif strict:
                raise InvalidConfiguration(f"unknown {task} parameter {k!r}")

    def pick(flag, key, default):
        if flag is not None:
            return flag
        return file_doc.get(key, default)

    seed = pick(seed, "seed", 0)
    sampler["seed"] = seed
    emit_val = pick(emit, "emit", ["images", "csv"])
    if isinstance(emit_val, str):
        emit_val = [e for e in emit_val.split(",") if e]
    cfg = RunConfig(
        task=task,
        sampler=SamplerConfig.from_dict(sampler),
        gmm=pick(gmm, "gmm", None),
        views=pick(views, "views", None),
        out_dir=pick(out_dir, "out_dir", "runs"),
        seed=seed,
        emit=tuple(emit_val),
        params=params,
    )
    return cfg.validate()

