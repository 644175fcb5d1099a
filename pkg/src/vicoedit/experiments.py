"""Run configuration, seeded experiment execution and run manifests.

Config files are JSON objects; unknown keys are rejected.  Per-repeat seeds
are derived from the base seed ``s`` by the counter scheme::

    seed_r   = SeedSequence([s, r]).generate_state(1)[0]
    source_r = default_rng(SeedSequence([s, r, 1]))   # sampled sources/contexts

so every arm of an ablation sees the same ``seed_r`` and the same source.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics, toy
from .flowmodel import ConceptSet, Condition, DomainMixtureModel, ModelError, load_model
from .sampler import EditConfig, EditResult, flowedit_run, generate, inversion_edit_run, invert, vicoedit_run
from .schedule import make_uniform_grid

__all__ = [
    "ConfigError",
    "config_from_dict",
    "RunConfig",
    "RunRecord",
    "TASKS",
    "load_manifest",
    "parse_config",
    "repeat_seed",
    "run_experiment",
]

TASKS = (
    "generate",
    "invert-roundtrip",
    "edit-flowedit",
    "edit-vicoedit",
    "edit-inversion-baseline",
    "ablation-skip-early",
    "ablation-k",
)
MANIFEST_SCHEMA = "vicoedit.run-manifest"
MANIFEST_VERSION = 1
DEFAULT_T_EDIT = 0.94

BUILTIN_MODELS = {
    "builtin:two-domain": lambda: toy.two_domain_scenario().model,
    "builtin:three-component": toy.three_component_mixture,
}

_TOP_KEYS = {
    "model_path",
    "task",
    "edit",
    "concepts",
    "source_prompt",
    "target_prompt",
    "source",
    "context",
    "output_dir",
    "repeats",
    "skip_n_max",
    "k_values",
}
_VECTOR_KEYS = {"vector", "prompt", "seed"}


class ConfigError(ValueError):
    """Config file could not be parsed or failed validation; ``field`` names the culprit."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class VectorSpec:
    """Either an explicit vector or a draw from a prompt's data distribution."""

    vector: tuple[float, ...] | None = None
    prompt: str | None = None
    seed: int | None = None

    def resolve(self, model: DomainMixtureModel, rng: np.random.Generator) -> np.ndarray:
        if self.vector is not None:
            return np.array(self.vector, dtype=float)
        if self.seed is not None:
            rng = np.random.default_rng(self.seed)
        return model.sample_data(Condition(self.prompt), 1, rng)[0]

    def to_dict(self) -> dict:
        return {k: v for k, v in (("vector", self.vector and list(self.vector)), ("prompt", self.prompt),
                                  ("seed", self.seed)) if v is not None}


@dataclass(frozen=True)
class RunConfig:
    model_path: str
    task: str
    edit: EditConfig
    concepts: ConceptSet | None = None
    source_prompt: str = "src"
    target_prompt: str = "tar"
    source: VectorSpec | None = None
    context: VectorSpec | None = None
    output_dir: str = "runs/default"
    repeats: int = 1
    skip_n_max: int = 40
    k_values: tuple[int, ...] = (1, 3)
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    def to_dict(self) -> dict:
        out = {
            "model_path": self.model_path,
            "task": self.task,
            "edit": self.edit.to_dict(),
            "source_prompt": self.source_prompt,
            "target_prompt": self.target_prompt,
            "output_dir": self.output_dir,
            "repeats": self.repeats,
            "skip_n_max": self.skip_n_max,
            "k_values": list(self.k_values),
        }
        if self.concepts is not None:
            out["concepts"] = {"pos": list(self.concepts.pos), "neg": list(self.concepts.neg)}
        if self.source is not None:
            out["source"] = self.source.to_dict()
        if self.context is not None:
            out["context"] = self.context.to_dict()
        return out

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def replace(self, **changes) -> RunConfig:
        data = {f: getattr(self, f) for f in self.__dataclass_fields__}
        data.update(changes)
        return RunConfig(**data)

    def load_model(self) -> DomainMixtureModel:
        if self.model_path in BUILTIN_MODELS:
            return BUILTIN_MODELS[self.model_path]()
        path = Path(self.model_path)
        if not path.is_absolute():
            path = self.base_dir / path
        return load_model(path)


def _vector_spec(name: str, raw) -> VectorSpec | None:
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise ConfigError(name, "must be an object with 'vector' or 'prompt'")
    extra = set(raw) - _VECTOR_KEYS
    if extra:
        raise ConfigError(f"{name}.{sorted(extra)[0]}", "unknown key")
    if ("vector" in raw) == ("prompt" in raw):
        raise ConfigError(name, "give exactly one of 'vector' or 'prompt'")
    vec = raw.get("vector")
    if vec is not None:
        try:
            vec = tuple(float(v) for v in vec)
        except (TypeError, ValueError):
            raise ConfigError(f"{name}.vector", "must be a list of numbers") from None
    seed = raw.get("seed")
    if seed is not None and not isinstance(seed, int):
        raise ConfigError(f"{name}.seed", "must be an integer")
    return VectorSpec(vec, raw.get("prompt"), seed)


def _default_n_max(n_steps: int, t_start) -> int:
    """Start index nearest ``t = 0.94`` (47 of 50 steps), kept below ``t = 1``."""
    n = max(1, round(DEFAULT_T_EDIT * n_steps))
    if t_start == 1.0:
        n = min(n, n_steps - 1)
    return max(1, min(n, n_steps))


def config_from_dict(data: dict, base_dir: Path = Path(".")) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown key")
    for key in ("model_path", "task"):
        if key not in data:
            raise ConfigError(key, "required")
    task = data["task"]
    if task not in TASKS:
        raise ConfigError("task", f"must be one of {', '.join(TASKS)}")

    edit_raw = data.get("edit", {})
    if not isinstance(edit_raw, dict):
        raise ConfigError("edit", "must be an object")
    if "n_steps" in edit_raw and "n_max" not in edit_raw and isinstance(edit_raw["n_steps"], int):
        edit_raw = {**edit_raw, "n_max": _default_n_max(edit_raw["n_steps"], edit_raw.get("t_start", 1.0))}
    try:
        edit = EditConfig.from_dict(edit_raw)
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        fld = msg.split(":", 1)[0] if ":" in msg else "edit"
        raise ConfigError(f"edit.{fld}" if fld != "edit" else "edit", msg.split(":", 1)[-1].strip()) from None

    concepts = None
    if "concepts" in data:
        raw = data["concepts"]
        if not isinstance(raw, dict) or set(raw) - {"pos", "neg"}:
            raise ConfigError("concepts", "must be an object with 'pos' and 'neg' lists")
        try:
            concepts = ConceptSet(tuple(raw.get("pos", ())), tuple(raw.get("neg", ())))
        except ModelError as exc:
            raise ConfigError("concepts", str(exc)) from None

    repeats = data.get("repeats", 1)
    if not isinstance(repeats, int) or repeats < 1:
        raise ConfigError("repeats", "must be an integer >= 1")
    k_values = tuple(data.get("k_values", (1, 3)))
    if not k_values or any(not isinstance(k, int) or k < 1 for k in k_values):
        raise ConfigError("k_values", "must be a non-empty list of integers >= 1")
    skip_n_max = data.get("skip_n_max", 40)
    if not isinstance(skip_n_max, int) or (task == "ablation-skip-early" and not 1 <= skip_n_max <= edit.n_steps):
        raise ConfigError("skip_n_max", f"must be an integer in [1, {edit.n_steps}]")

    cfg = RunConfig(
        model_path=str(data["model_path"]),
        task=task,
        edit=edit,
        concepts=concepts,
        source_prompt=str(data.get("source_prompt", "src")),
        target_prompt=str(data.get("target_prompt", "tar")),
        source=_vector_spec("source", data.get("source")),
        context=_vector_spec("context", data.get("context")),
        output_dir=str(data.get("output_dir", "runs/default")),
        repeats=repeats,
        skip_n_max=skip_n_max,
        k_values=k_values,
        base_dir=base_dir,
    )
    if task.startswith(("edit-", "ablation-")) and concepts is None:
        raise ConfigError("concepts", f"required for task {task}")
    if task != "generate" and cfg.source is None:
        raise ConfigError("source", f"required for task {task}")
    return cfg


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError("<file>", f"{path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("<parse>", f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return config_from_dict(data, base_dir=path.parent)


def repeat_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


# ----------------------------------------------------------------- records
@dataclass
class RunRecord:
    config: dict
    config_digest: str
    base_seed: int
    seeds: list[int]
    repeats: list[dict]
    wall_time: float
    artifacts: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        """Median of every metric per arm."""
        arms: dict[str, dict[str, list]] = {}
        for rep in self.repeats:
            for arm, body in rep["arms"].items():
                for k, v in body["metrics"].items():
                    arms.setdefault(arm, {}).setdefault(k, []).append(v)
        return {arm: {k: float(np.median(v)) for k, v in ms.items()} for arm, ms in arms.items()}

    def metric(self, arm: str, name: str) -> np.ndarray:
        return np.array([rep["arms"][arm]["metrics"][name] for rep in self.repeats])

    def to_dict(self) -> dict:
        return {
            "schema": MANIFEST_SCHEMA,
            "version": MANIFEST_VERSION,
            "config": self.config,
            "config_digest": self.config_digest,
            "base_seed": self.base_seed,
            "seeds": self.seeds,
            "repeats": self.repeats,
            "wall_time": self.wall_time,
            "artifacts": self.artifacts,
            "summary": self.summary(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> RunRecord:
        if data.get("schema") != MANIFEST_SCHEMA:
            raise ValueError("not a run manifest")
        if data.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {data.get('version')}")
        rec = cls(
            config=data["config"],
            config_digest=data["config_digest"],
            base_seed=data["base_seed"],
            seeds=list(data["seeds"]),
            repeats=data["repeats"],
            wall_time=data["wall_time"],
            artifacts=list(data.get("artifacts", [])),
        )
        digest = hashlib.sha256(json.dumps(rec.config, sort_keys=True).encode()).hexdigest()
        if digest != rec.config_digest:
            raise ValueError("manifest config digest does not match its config")
        return rec


def load_manifest(path) -> RunRecord:
    return RunRecord.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------- execution
def _edit_metrics(model, res: EditResult, x_src, keep, cond_src, cond_tar) -> dict:
    return {
        "source_rmse_masked": metrics.rmse(res.x_final, x_src, keep),
        "source_rmse_unmasked": metrics.rmse(res.x_final, x_src),
        "target_mode_distance": metrics.target_mode_distance(model, res.x_final, cond_tar, ~keep),
        "residual_final": res.per_step[-1].residual,
        "nearest_is_target": metrics.nearest_is_target(model, res.x_final, cond_src, cond_tar),
    }


def _edit_arms(cfg: RunConfig, edit: EditConfig) -> dict:
    """Arm name -> (runner, EditConfig) for an edit or ablation task."""
    if cfg.task == "edit-vicoedit":
        return {"vicoedit": (vicoedit_run, edit)}
    if cfg.task == "edit-flowedit":
        return {"flowedit": (flowedit_run, edit)}
    if cfg.task == "edit-inversion-baseline":
        return {"inversion": (inversion_edit_run, edit), "vicoedit": (vicoedit_run, edit)}
    if cfg.task == "ablation-skip-early":
        return {
            f"n_max={edit.n_max}": (vicoedit_run, edit),
            f"n_max={cfg.skip_n_max}": (vicoedit_run, edit.replace(n_max=cfg.skip_n_max)),
        }
    if cfg.task == "ablation-k":
        return {f"K={k}": (vicoedit_run, edit.replace(k_samples=k)) for k in cfg.k_values}
    raise ConfigError("task", f"{cfg.task} is not an edit task")


def _write_trajectory(path: Path, res: EditResult) -> None:
    rows = res.trajectory_rows()
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _run_repeat(cfg: RunConfig, model, r: int, seed: int, out: Path | None, artifacts: list) -> dict:
    edit = cfg.edit.replace(seed=seed)
    src_rng = np.random.default_rng(np.random.SeedSequence([cfg.edit.seed, r, 1]))
    context = cfg.context.resolve(model, src_rng) if cfg.context is not None else None
    cond_src = Condition(cfg.source_prompt, None, cfg.concepts)
    cond_tar = Condition(cfg.target_prompt, context, cfg.concepts)
    arms: dict[str, dict] = {}

    if cfg.task == "generate":
        grid = make_uniform_grid(edit.n_steps, edit.t_start)
        z = generate(model, cond_tar, grid, seed, c_img=edit.cfg_tar_img, c_text=edit.cfg_tar_T)
        x = model.decode(z)
        arms["generate"] = {
            "metrics": {"target_mode_distance": metrics.target_mode_distance(model, x, cond_tar)},
            "final": {"z": z.tolist(), "x": x.tolist()},
        }
    else:
        z_src = cfg.source.resolve(model, src_rng)
        if z_src.shape != (model.latent_dim,):
            raise ConfigError("source", f"vector must have {model.latent_dim} entries")
        x_src = model.decode(z_src)
        if cfg.task == "invert-roundtrip":
            grid = make_uniform_grid(edit.n_steps, edit.t_start)
            noise = invert(model, cond_src, grid, z_src)
            back = generate_from(model, cond_src, grid, noise)
            arms["roundtrip"] = {
                "metrics": {"roundtrip_error": float(np.linalg.norm(back - z_src))},
                "final": {"noise": noise.tolist(), "z": back.tolist()},
            }
        else:
            keep = metrics.preserved_pixels(model, cfg.source_prompt, cfg.concepts)
            for arm, (runner, arm_cfg) in _edit_arms(cfg, edit).items():
                res = runner(model, z_src, cond_src, cond_tar, cfg.concepts, x_src, arm_cfg)
                body = {
                    "metrics": _edit_metrics(model, res, x_src, keep, cond_src, cond_tar),
                    "final": {"z": res.z_final.tolist(), "x": res.x_final.tolist()},
                }
                if out is not None:
                    traj = out / f"repeat_{r:03d}_{_slug(arm)}_trajectory.csv"
                    _write_trajectory(traj, res)
                    body["trajectory"] = traj.name
                    artifacts.append(traj.name)
                arms[arm] = body

    if out is not None:
        final = out / f"repeat_{r:03d}_final.json"
        final.write_text(json.dumps({arm: b.pop("final") for arm, b in arms.items()}, indent=1) + "\n")
        artifacts.append(final.name)
        for b in arms.values():
            b["final_state"] = final.name
    else:
        for b in arms.values():
            b.pop("final")
    for arm, b in arms.items():
        if not all(np.isfinite(v) for v in b["metrics"].values()):
            raise FloatingPointError(f"non-finite metric in arm {arm}")
    return {"index": r, "seed": seed, "arms": arms}


def generate_from(model, cond, grid, noise) -> np.ndarray:
    """Integrate a given noise vector from ``t_N`` down to 0."""
    from .sampler import guided_velocity, integrate

    return integrate(lambda x, t: guided_velocity(model, x, t, cond), noise, grid.times[::-1])


def _slug(name: str) -> str:
    return name.replace("=", "").replace(" ", "_")


def run_experiment(cfg: RunConfig, write: bool = True, log=None) -> RunRecord:
    """Execute ``cfg.repeats`` seeded repeats; write a manifest and per-repeat files when ``write``."""
    model = cfg.load_model()
    out = None
    if write:
        out = Path(cfg.output_dir)
        if not out.is_absolute():
            out = cfg.base_dir / out
        out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    seeds = [repeat_seed(cfg.edit.seed, r) for r in range(cfg.repeats)]
    artifacts: list[str] = []
    repeats = []
    for r, seed in enumerate(seeds):
        try:
            repeats.append(_run_repeat(cfg, model, r, seed, out, artifacts))
        except ConfigError:
            raise
        except Exception as exc:
            raise RuntimeError(f"repeat {r}: {exc}") from exc
        if log:
            log(f"repeat {r + 1}/{cfg.repeats} done")
    cfg_dict = cfg.to_dict()
    record = RunRecord(
        config=cfg_dict,
        config_digest=cfg.digest(),
        base_seed=cfg.edit.seed,
        seeds=seeds,
        repeats=repeats,
        wall_time=time.perf_counter() - start,
        artifacts=artifacts,
    )
    if out is not None:
        (out / "manifest.json").write_text(json.dumps(record.to_dict(), indent=1) + "\n")
    return record
