"""Stage functions shared by the CLI: every artifact lives under one output root.

Layout::

    out/config.cfg                 effective config (first line: hash)
    out/policy/{target,substitute}.bin
    out/data/dataset.npz           offline log
    out/data/annotated.npz         log with per-step advantage
    out/model/{values,predictor,generator}.bin, manifest.json
    out/reports/...                losses (csv + png), attack report, trace, ablation tables
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .attack import (AttackReport, black_box_session, dataset_rtg_target, run_attack, white_box_session,
                     write_report, write_trace)
from .checkpoint import file_hash, load_module, save_module
from .config import RunConfig
from .envs import make_env
from .errors import ConfigError, DependencyError
from .generator import GeneratorConfig, PerturbationGenerator, train_generator
from .policies import BlackBoxPolicy, ToyPolicy, train_with_retries
from .predictor import AdvantagePredictor, train_predictor
from .sequence import EmbeddingConfig, ScaleConfig
from .trajectory import collect_dataset, load_dataset, save_dataset
from .values import Transitions, ValueHeads, annotate_dataset, train_values

ABLATION_AXES = {
    "num_scales": ["1", "2", "3", "4", "5"],
    "base_window": [str(k) for k in range(1, 11)],
    "norm": ["l1", "l2", "linf"],
    "condition": ["weighted_advantage", "returns_to_go", "ordinary_advantage"],
}
# which stages an ablation axis invalidates
_AXIS_STAGES = {"num_scales": ("generator",), "base_window": ("generator",), "norm": ("generator",),
                "condition": ("annotate", "predictor", "generator")}


class Workspace:
    def __init__(self, root, cfg: RunConfig, upstream=None):
        self.root = Path(root)
        self.cfg = cfg
        self.hash = cfg.hash()
        # ablation variants read shared upstream artifacts from the parent root
        self.upstream = Path(upstream) if upstream else self.root

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def up(self, *parts) -> Path:
        return self.upstream.joinpath(*parts)

    def require(self, path: Path) -> Path:
        if not path.exists():
            raise DependencyError(f"missing upstream artifact: {path}")
        return path

    def manifest(self, **extra) -> dict:
        return {"config_hash": self.hash, "config": self.cfg.to_dict(), **extra}

    def echo_config(self):
        p = self.path("config.cfg")
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(f"# config_hash: {self.hash}\n{self.cfg.dumps()}")


def build_env(cfg: RunConfig):
    return make_env(cfg.env, cfg.layout or None)


# ---------------------------------------------------------------- logging helpers

def write_curves(path: Path, curves: dict, config_hash: str, title: str = "") -> Path:
    """Loss curves as CSV (always) and PNG (when matplotlib is installed)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(curves)
    n = max(len(v) for v in curves.values())
    with path.open("w", newline="") as fh:
        fh.write(f"# config_hash: {config_hash}\n")
        w = csv.writer(fh)
        w.writerow(["step", *names])
        for i in range(n):
            w.writerow([i, *(curves[k][i] if i < len(curves[k]) else "" for k in names)])
    _plot(path.with_suffix(".png"), curves, f"{title} [{config_hash}]")
    return path


def _plot(path: Path, curves: dict, title: str):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return None
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for k, v in curves.items():
        ax.plot(v, label=k)
    ax.set_title(title)
    ax.set_xlabel("step")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path


# ---------------------------------------------------------------- model builders

def _policy_from(manifest):
    s = manifest["spec"]
    return ToyPolicy(s["obs_shape"], s["n_actions"], s["hidden"], s["algorithm"], s["beta"])


def _values_from(manifest):
    s = manifest["spec"]
    return ValueHeads(s["obs_shape"], s["n_actions"], s["hidden"], s["gamma"], s["sigma"], s["lambda"],
                      s["refresh"], s["continuous"])


def _predictor_from(manifest):
    s = dict(manifest["spec"])
    clip = s.pop("clip") is not None
    return AdvantagePredictor(s.pop("obs_shape"), clip=clip, **s)


def _generator_from(manifest):
    s = manifest["spec"]
    return PerturbationGenerator(s["obs_shape"], s["n_actions"], GeneratorConfig.from_dict(s["config"]),
                                 s["continuous"])


def generator_config(cfg: RunConfig, obs_shape) -> GeneratorConfig:
    tokens = cfg.context * (_patches(obs_shape, cfg.patch_side) + 3)
    return GeneratorConfig(
        EmbeddingConfig(cfg.model_dim, cfg.num_heads, cfg.num_layers, cfg.dropout, tokens),
        ScaleConfig(cfg.num_scales, cfg.base_window, cfg.growth, cfg.growth_ratio),
        cfg.context, cfg.patch_side, cfg.epsilon, cfg.omega, cfg.norm, cfg.condition,
    )


def _patches(obs_shape, p) -> int:
    if len(obs_shape) >= 2:
        return (obs_shape[0] // p) * (obs_shape[1] // p)
    return 1


def load_policy(ws: Workspace, name: str = "target") -> ToyPolicy:
    policy, _ = load_module(ws.require(ws.up("policy", f"{name}.bin")), _policy_from)
    return policy.eval()


def attacker_policy(ws: Workspace):
    """The module whose gradients the attacker may use: the target (white) or the substitute (black)."""
    return load_policy(ws, "substitute" if ws.cfg.mode == "black" else "target")


# ---------------------------------------------------------------- stages

def stage_policy(ws: Workspace) -> dict:
    cfg, env = ws.cfg, build_env(ws.cfg)
    jobs = [("target", cfg.policy_algorithm, cfg.policy_episodes)]
    if cfg.mode == "black":
        jobs.append(("substitute", cfg.substitute_algorithm, cfg.substitute_episodes))
    out = {}
    for k, (name, algorithm, episodes) in enumerate(jobs):
        policy = train_with_retries(env, algorithm, episodes, cfg.seed + 7919 * k)
        save_module(ws.path("policy", f"{name}.bin"), policy,
                    ws.manifest(kind="policy", name=name, spec=policy.spec(), report=policy.report))
        out[name] = policy.report
    return out


def stage_collect(ws: Workspace):
    cfg, env = ws.cfg, build_env(ws.cfg)
    target = load_policy(ws, "target")
    acting, grads = target, None
    if cfg.mode == "black":
        acting, grads = BlackBoxPolicy(target), load_policy(ws, "substitute")
    ds = collect_dataset(env, acting, cfg.env, cfg.mix, cfg.collect_episodes, cfg.epsilon, cfg.seed,
                         config_hash=ws.hash, gradient_source=grads)
    save_dataset(ds, ws.path("data", "dataset.npz"))
    return ds


def stage_values(ws: Workspace):
    cfg = ws.cfg
    ds = load_dataset(ws.require(ws.up("data", "dataset.npz")))
    torch.manual_seed(cfg.seed)
    heads = ValueHeads(ds.obs_shape, ds.manifest.n_actions, cfg.value_hidden, cfg.gamma, cfg.sigma, cfg.lam,
                       cfg.target_refresh)
    history = train_values(Transitions.from_dataset(ds, cfg.reward_transform), heads, cfg.value_steps, cfg.lr,
                           seed=cfg.seed)
    save_module(ws.path("model", "values.bin"), heads,
                ws.manifest(kind="values", spec=heads.spec(), truncated_count=history["truncated_count"]))
    write_curves(ws.path("reports", "values_loss.csv"),
                 {"q_loss": history["q_loss"], "v_loss": history["v_loss"]}, ws.hash, "value heads")
    return heads


def load_values(ws: Workspace) -> ValueHeads:
    heads, _ = load_module(ws.require(ws.up("model", "values.bin")), _values_from)
    return heads.eval()


def stage_annotate(ws: Workspace):
    ds = load_dataset(ws.require(ws.up("data", "dataset.npz")))
    ads = annotate_dataset(ds, load_values(ws), ws.cfg.advantage_transform)
    ads.manifest = replace(ads.manifest, config_hash=ws.hash)
    save_dataset(ads, ws.path("data", "annotated.npz"))
    return ads


def stage_predictor(ws: Workspace):
    cfg = ws.cfg
    ads = load_dataset(ws.require(ws.path("data", "annotated.npz")))
    torch.manual_seed(cfg.seed)
    predictor = AdvantagePredictor(ads.obs_shape, cfg.lam, cfg.predictor_dim, cfg.predictor_dim, cfg.patch_side,
                                   kappa=cfg.kappa)
    history = train_predictor(ads, load_values(ws), predictor, cfg.predictor_steps, cfg.lr, cfg.epsilon,
                              seed=cfg.seed, max_states=cfg.predictor_states, transform=cfg.advantage_transform,
                              mode=cfg.target_mode)
    save_module(ws.path("model", "predictor.bin"), predictor,
                ws.manifest(kind="predictor", spec=predictor.spec(), target_mean=history["target_mean"]))
    write_curves(ws.path("reports", "predictor_loss.csv"), {"regression": history["reg"]}, ws.hash,
                 "advantage predictor")
    return predictor


def stage_generator(ws: Workspace):
    cfg = ws.cfg
    ads = load_dataset(ws.require(ws.path("data", "annotated.npz")))
    policy = attacker_policy(ws)
    torch.manual_seed(cfg.seed)
    model = PerturbationGenerator(ads.obs_shape, ads.manifest.n_actions, generator_config(cfg, ads.obs_shape))
    history = train_generator(ads, model, policy, cfg.generator_steps, cfg.lr, batch_size=cfg.batch_size,
                              seed=cfg.seed)
    save_module(ws.path("model", "generator.bin"), model,
                ws.manifest(kind="generator", spec=model.spec(), rtg_target=dataset_rtg_target(ads)))
    write_curves(ws.path("reports", "generator_loss.csv"),
                 {"action_loss": history["action_loss"], "norm_loss": history["norm_loss"]}, ws.hash, "generator")
    _write_model_manifest(ws)
    return model


def _write_model_manifest(ws: Workspace):
    files = {}
    for name in ("values.bin", "predictor.bin", "generator.bin"):
        p = ws.path("model", name) if ws.path("model", name).exists() else ws.up("model", name)
        if p.exists():
            files[name] = {"path": str(p), "sha256": file_hash(p)}
    ws.path("model", "manifest.json").write_text(json.dumps(ws.manifest(files=files), indent=2))


def load_models(ws: Workspace):
    gen, gman = load_module(ws.require(ws.path("model", "generator.bin")), _generator_from)
    pred, _ = load_module(ws.require(ws.path("model", "predictor.bin")), _predictor_from)
    return gen.eval(), pred.eval(), gman


def stage_attack(ws: Workspace, trace: bool = True):
    cfg, env = ws.cfg, build_env(ws.cfg)
    gen, pred, gman = load_models(ws)
    target = load_policy(ws, "target")
    kwargs = dict(condition=cfg.condition, rtg_target=float(gman.get("rtg_target", 0.0)), env_id=cfg.env)
    if cfg.mode == "black":
        session = black_box_session(load_policy(ws, "substitute"), target, gen, pred, env, cfg.epsilon, **kwargs)
    else:
        session = white_box_session(gen, pred, target, env, cfg.epsilon, **kwargs)
    rows = [] if trace else None
    report = run_attack(session, cfg.attack_episodes, cfg.attack_seed, trace=rows, config_hash=ws.hash)
    write_report(report, ws.path("reports", "report.json"))
    if trace:
        write_trace(rows, ws.path("reports", "trace.csv"), config_hash=ws.hash)
    return report


STAGES = {"train-policy": stage_policy, "collect": stage_collect, "train-values": stage_values,
          "annotate": stage_annotate, "train-predictor": stage_predictor,
          "train-generator": stage_generator, "attack": stage_attack}
ORDER = ("train-policy", "collect", "train-values", "annotate", "train-predictor", "train-generator", "attack")


def run_pipeline(ws: Workspace, stages=ORDER, log=print) -> dict:
    ws.echo_config()
    timings, t0 = {}, time.perf_counter()
    result = None
    for name in stages:
        t = time.perf_counter()
        result = STAGES[name](ws)
        timings[name] = time.perf_counter() - t
        log(f"[{time.perf_counter() - t0:7.1f}s] {name} done")
    return {"timings": timings, "total_s": time.perf_counter() - t0, "last": result}


# ---------------------------------------------------------------- ablation

def ablate(ws: Workspace, axis: str, values=None, log=print) -> list[dict]:
    """Retrain the stages ``axis`` touches for each value; shared upstream comes from ``ws.root``.

    Every variant attacks the same paired seeds, so rows differ only in the swept setting.
    """
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {', '.join(ABLATION_AXES)}")
    for p in (("policy", "target.bin"), ("data", "dataset.npz"), ("model", "values.bin")):
        ws.require(ws.path(*p))
    rows = []
    for value in values or ABLATION_AXES[axis]:
        cfg = ws.cfg.with_overrides([f"{axis}={value}"])
        sub = Workspace(ws.path("ablation", axis, str(value)), cfg, upstream=ws.root)
        sub.echo_config()
        stages = _AXIS_STAGES[axis]
        if sub.hash == ws.hash and ws.path("reports", "report.json").exists():
            # the variant is the parent run itself; training is deterministic, so reuse it
            report = AttackReport(**json.loads(ws.path("reports", "report.json").read_text()))
            rows.append(_ablation_row(axis, value, report, sub.hash))
            log(f"{axis}={value}: reused parent run")
            continue
        if "annotate" not in stages:
            # reuse the parent's annotated log and predictor
            sub.path("data").mkdir(parents=True, exist_ok=True)
            sub.path("model").mkdir(parents=True, exist_ok=True)
            for p in (("data", "annotated.npz"), ("model", "predictor.bin")):
                src = ws.require(ws.path(*p))
                sub.path(*p).write_bytes(src.read_bytes())
        else:
            stage_annotate(sub)
            stage_predictor(sub)
        stage_generator(sub)
        report = stage_attack(sub, trace=False)
        rows.append(_ablation_row(axis, value, report, sub.hash))
        log(f"{axis}={value}: attacked {report.attacked_mean:.3f} clean {report.clean_mean:.3f}")
    write_ablation(ws, axis, rows)
    return rows


def _ablation_row(axis, value, report, config_hash) -> dict:
    return {axis: value, "attacked_mean": report.attacked_mean, "attacked_std": report.attacked_std,
            "clean_mean": report.clean_mean, "reduction": report.reduction, "config_hash": config_hash,
            "attacked_returns": report.attacked_returns}


def write_ablation(ws: Workspace, axis: str, rows: list[dict]):
    base = ws.path("reports", f"ablation_{axis}")
    base.parent.mkdir(parents=True, exist_ok=True)
    with base.with_suffix(".csv").open("w", newline="") as fh:
        fh.write(f"# config_hash: {ws.hash}\n")
        w = csv.writer(fh)
        w.writerow([axis, "attacked_mean", "attacked_std", "clean_mean", "reduction", "config_hash"])
        for r in rows:
            w.writerow([r[axis], r["attacked_mean"], r["attacked_std"], r["clean_mean"], r["reduction"],
                        r["config_hash"]])
    lines = [f"config_hash: {ws.hash}", "", f"| {axis} | attacked | clean | reduction |", "|---|---|---|---|"]
    for r in rows:
        red = "n/a" if r["reduction"] is None else f"{r['reduction']:.1%}"
        lines.append(f"| {r[axis]} | {r['attacked_mean']:.3f} | {r['clean_mean']:.3f} | {red} |")
    base.with_suffix(".md").write_text("\n".join(lines) + "\n")
    curves = {str(r[axis]): np.cumsum(r["attacked_returns"]) / np.arange(1, len(r["attacked_returns"]) + 1)
              for r in rows}
    _plot(base.with_suffix(".png"), curves, f"running attacked mean by {axis} [{ws.hash}]")
    return base
