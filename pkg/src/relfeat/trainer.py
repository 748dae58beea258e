"""Optimisation loop: losses on synthetic pairs, SGD with momentum, logs and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import datagen as dg
from . import diffcore as dc
from . import evaluation as ev
from . import losses as ls
from . import network as nw
from . import teacher as tch
from . import tsg

log = logging.getLogger(__name__)

COMPONENTS = ("l_det", "l_des", "l_dis", "l_edge", "l_wsc")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    weight_decay: float = 0.0001
    momentum: float = 0.9
    batch: int = 4
    epochs: int = 30
    steps: int | None = None        # overrides epochs when set
    margin: float = 0.07
    temperature: float = 5.0
    des_margin: float = 1.0
    wsc_points: int = 256
    psrd: bool = True
    eag: bool = True
    wsc: bool = True
    seed: int = 0
    width_factor: float = 0.25
    height: int = 64
    width: int = 64
    n_shapes: int = 8
    train_pairs: int = 512
    eval_pairs: int = 32
    checkpoint_every: int = 500
    eval_threshold: float = 0.0
    eval_nms_radius: int = 2
    eval_max_k: int = 128

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.height % 8 or self.width % 8:
            raise ValueError(f"image size {self.height}x{self.width} must be divisible by 8")

    def model_config(self) -> nw.ModelConfig:
        return nw.ModelConfig(width=self.width_factor, psrd=self.psrd, eag=self.eag)

    def extract_config(self) -> ev.ExtractConfig:
        return ev.ExtractConfig(self.eval_threshold, self.eval_nms_radius, self.eval_max_k)

    def total_steps(self, n_pairs: int) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * math.ceil(n_pairs / self.batch)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


FULL_SCALE = dict(batch=14, epochs=30, width_factor=1.0)

ABLATION_ROWS = (
    ("baseline", dict(psrd=False, eag=False, wsc=False)),
    ("+PSRD", dict(psrd=True, eag=False, wsc=False)),
    ("+PSRD+EAG", dict(psrd=True, eag=True, wsc=False)),
    ("+PSRD+EAG+WSC", dict(psrd=True, eag=True, wsc=True)),
)


# ---------------------------------------------------------------- losses

def _mean(terms: list) -> dc.DiffArray:
    if not terms:
        return ls.zero()
    out = terms[0]
    for t in terms[1:]:
        out = dc.add(out, t)
    return dc.mul(out, 1.0 / len(terms))


def batch_images(batch: list[dg.TrainingPair]) -> np.ndarray:
    """(2B, H, W): all first images, then all second images."""
    return np.stack([p.scene1.image for p in batch] + [p.scene2.image for p in batch])


def losses_from_outputs(out: nw.NetworkOutputs, batch: list[dg.TrainingPair], cfg: TrainConfig,
                        sample_seed: int = 0) -> ls.LossBundle:
    """Every enabled component on fixed network outputs; disabled ones are exactly zero.

    ``sample_seed`` drives the grouping-contrastive point sampler only.
    """
    b = len(batch)
    scenes = [p.scene1 for p in batch] + [p.scene2 for p in batch]
    kp = np.stack([s.keypoint_labels for s in scenes])[:, None]
    l_det = ls.loss_det(out.det_logits, kp)

    des_terms, wsc_terms = [], []
    for i, p in enumerate(batch):
        if len(p.p1) < 2:
            continue
        d1 = nw.image_slice(out.descriptors_dense, i)
        d2 = nw.image_slice(out.descriptors_dense, b + i)
        a1 = nw.image_slice(out.att_weights, i)
        a2 = nw.image_slice(out.att_weights, b + i)
        anchors = nw.sample_descriptors(d1, p.p1)
        positives = nw.sample_descriptors(d2, p.p2)
        try:
            des_terms.append(ls.loss_des(anchors, positives, nw.sample_map(a1, p.p1), nw.sample_map(a2, p.p2),
                                         p.p2, margin=cfg.des_margin))
        except ls.DegenerateSet:
            pass
    l_des = _mean(des_terms)

    l_wsc = ls.zero()
    if cfg.wsc:
        rng = np.random.default_rng([cfg.seed, sample_seed, 4049])
        for i, s in enumerate(scenes):
            pts, labels = ls.sample_point_set(s.grouping, rng, cfg.wsc_points)
            if len(pts) < 2:
                continue
            desc = nw.sample_descriptors(nw.image_slice(out.descriptors_dense, i), pts)
            try:
                gd = ls.group_distances(desc, labels)
            except ls.DegenerateSet:
                continue
            wsc_terms.append(ls.loss_wsc(gd.d_pos, gd.d_neg, cfg.margin, cfg.temperature))
        l_wsc = _mean(wsc_terms)

    l_dis = ls.zero()
    if cfg.psrd:
        if out.c4d is None:
            raise ValueError("relation distillation needs the distillation head")
        n, c, h, w = out.c4d.shape
        terms = []
        for i, s in enumerate(scenes):
            feat = dc.transpose(dc.reshape(nw.image_slice(out.c4d, i), (c, h * w)), (1, 0))
            terms.append(ls.loss_dis(tch.relation_matrix(s.teacher_F), tch.relation_matrix(feat)))
        l_dis = _mean(terms)

    l_edge = ls.zero()
    if cfg.eag:
        if out.edge_pred is None:
            raise ValueError("edge loss needs the edge head")
        l_edge = ls.loss_edge(np.stack([s.edge for s in scenes])[:, None], out.edge_pred)
    return ls.LossBundle(l_det, l_des, l_dis, l_edge, l_wsc)


def compute_losses(params, batch, cfg: TrainConfig, sample_seed: int = 0) -> ls.LossBundle:
    out = nw.forward(batch_images(batch), params, cfg.model_config())
    return losses_from_outputs(out, batch, cfg, sample_seed)


def check_finite(bundle: ls.LossBundle) -> None:
    for name in COMPONENTS:
        v = float(getattr(bundle, name).data)
        if not np.isfinite(v):
            raise TrainingDiverged(f"non-finite loss in component {name} ({v})")


# ---------------------------------------------------------------- optimiser

@dataclass
class TrainState:
    params: dict[str, dc.DiffArray]
    velocity: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params) -> "TrainState":
        return cls(params, {k: np.zeros_like(v.data) for k, v in params.items()}, 0)


def sgd_update(state: TrainState, cfg: TrainConfig) -> None:
    """Momentum SGD, then decay applied to the weights directly (decoupled)."""
    for k, p in state.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        v = state.velocity[k]
        v *= cfg.momentum
        v += g
        p.data = p.data - cfg.lr * v - (cfg.lr * cfg.weight_decay) * p.data
        p.grad = None


def train_step(state: TrainState, batch: list[dg.TrainingPair], cfg: TrainConfig) -> ls.LossBundle:
    size = batch[0].scene1.image.shape
    if size != (cfg.height, cfg.width):
        raise ValueError(f"batch images are {size}, config expects {(cfg.height, cfg.width)}")
    for p in state.params.values():
        p.grad = None
    bundle = compute_losses(state.params, batch, cfg, sample_seed=state.step)
    check_finite(bundle)
    dc.backward(bundle.total)
    sgd_update(state, cfg)
    state.step += 1
    return bundle


# ---------------------------------------------------------------- data

def train_pair(cfg: TrainConfig, i: int) -> dg.TrainingPair:
    return dg.generate_pair(cfg.seed * 1_000_003 + i, cfg.seed * 7_919 + 2 * i + 1, cfg.height, cfg.width,
                            cfg.n_shapes)


def heldout_pairs(cfg: TrainConfig) -> list[dg.TrainingPair]:
    """Scenes from a seed range disjoint from the training pool."""
    base = 900_000_000 + cfg.seed * 10_007
    return [dg.generate_pair(base + i, base + 3 * i + 2, cfg.height, cfg.width, cfg.n_shapes)
            for i in range(cfg.eval_pairs)]


def synthetic_pool(cfg: TrainConfig) -> list[dg.TrainingPair]:
    return [train_pair(cfg, i) for i in range(cfg.train_pairs)]


def batch_indices(n: int, batch: int, step: int, seed: int) -> np.ndarray:
    """Indices for ``step``: a fresh permutation per epoch, wrapping at the end."""
    per_epoch = max(1, n // batch)
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch, 2718]).permutation(n)
    return perm[k * batch:(k + 1) * batch] if n >= batch else perm[np.arange(batch) % n]


# ---------------------------------------------------------------- run

@dataclass
class TrainResult:
    params: dict[str, dc.DiffArray]
    model: nw.ModelConfig
    records: list[dict]
    report: ev.MatchReport | None
    checkpoint: Path | None


def save_state(path, state: TrainState, cfg: TrainConfig) -> None:
    path = Path(path)
    nw.save_checkpoint(path, state.params, cfg.model_config(), {"step": state.step, "train_config": cfg.to_dict()})
    tsg.save_bundle(velocity_path(path), {k: v for k, v in sorted(state.velocity.items())})


def velocity_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".velocity")


def load_state(path, cfg: TrainConfig) -> TrainState:
    params, _ = nw.load_checkpoint(path, expect=cfg.model_config())
    meta = json.loads(nw.sidecar_path(path).read_text())
    vpath = velocity_path(path)
    velocity = tsg.load_bundle(vpath) if vpath.exists() else {k: np.zeros_like(v.data) for k, v in params.items()}
    return TrainState(params, {k: np.array(v, dtype=np.float64) for k, v in velocity.items()}, int(meta.get("step", 0)))


def run_training(cfg: TrainConfig, out_dir=None, pairs: list[dg.TrainingPair] | None = None, resume=None,
                 evaluate: bool = True, progress_every: int = 100) -> TrainResult:
    """Train from ``cfg.seed``; writes checkpoints and ``train_log.jsonl`` when ``out_dir`` is given.

    The log holds only seed-determined values; wall-clock timings go to
    ``timing.jsonl`` so that two identical runs produce identical logs.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    pool = pairs if pairs is not None else synthetic_pool(cfg)
    if not pool:
        raise ValueError("empty training set")
    total = cfg.total_steps(len(pool))
    model = cfg.model_config()
    state = load_state(resume, cfg) if resume is not None else TrainState.fresh(nw.init_params(model, cfg.seed))

    records: list[dict] = []
    log_f = timing_f = None
    if out is not None:
        mode = "a" if resume is not None else "w"
        log_f = open(out / "train_log.jsonl", mode)
        timing_f = open(out / "timing.jsonl", mode)
    try:
        if resume is None and log_f is not None:
            _emit(log_f, records, {"event": "config", "config": cfg.to_dict(), "architecture": model.architecture(),
                                   "n_params": nw.param_count(state.params), "total_steps": total})
        t0 = time.perf_counter()
        while state.step < total:
            idx = batch_indices(len(pool), cfg.batch, state.step, cfg.seed)
            bundle = train_step(state, [pool[i] for i in idx], cfg)
            rec = {"step": state.step, **{k: float(v) for k, v in bundle.values().items()}}
            _emit(log_f, records, rec)
            if timing_f is not None:
                timing_f.write(json.dumps({"step": state.step, "wall": time.perf_counter() - t0}) + "\n")
            if progress_every and state.step % progress_every == 0:
                log.info("step %d/%d total %.4f", state.step, total, rec["total"])
            if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_state(out / f"ckpt_{state.step:06d}.tsg", state, cfg)
        final = None
        if out is not None:
            final = out / "final.tsg"
            save_state(final, state, cfg)
        report = None
        if evaluate and cfg.eval_pairs > 0:
            ext = ev.ModelExtractor(state.params, model, cfg.extract_config())
            report = ev.evaluate_pairs(ext, heldout_pairs(cfg), "heldout")
            _emit(log_f, records, {"event": "eval", "step": state.step, **report.summary()})
    finally:
        for f in (log_f, timing_f):
            if f is not None:
                f.close()
    return TrainResult(state.params, model, records, report, final)


def _emit(f, records: list, rec: dict) -> None:
    records.append(rec)
    if f is not None:
        f.write(json.dumps(rec, sort_keys=True) + "\n")
        f.flush()


def moving_average(values, window: int = 10) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([v.mean()]) if len(v) else v
    return np.convolve(v, np.ones(window) / window, mode="valid")


def loss_drop(records: list[dict], window: int = 10) -> float:
    """Relative drop of the total loss: 1 - (final moving average / step-10 moving average)."""
    totals = [r["total"] for r in records if "total" in r]
    ma = moving_average(totals, window)
    return float(1.0 - ma[-1] / ma[0])


# ---------------------------------------------------------------- ablation

@dataclass
class AblationRow:
    name: str
    psrd: bool
    eag: bool
    wsc: bool
    mma3: float
    auc5: float
    mean_matches: float


def ablation_dirname(name: str) -> str:
    """'+PSRD+EAG' -> 'plus_PSRD_plus_EAG'."""
    return name.replace("+", "_plus_").strip("_").replace("__", "_")


def run_ablation(cfg: TrainConfig, out_dir=None, pairs=None) -> list[AblationRow]:
    """The four toggle configurations in order, sharing seed and data."""
    pool = pairs if pairs is not None else synthetic_pool(cfg)
    rows = []
    for name, toggles in ABLATION_ROWS:
        sub = replace(cfg, **toggles)
        d = Path(out_dir) / ablation_dirname(name) if out_dir is not None else None
        res = run_training(sub, d, pairs=pool)
        rep = res.report
        rows.append(AblationRow(name, sub.psrd, sub.eag, sub.wsc, rep.mma_at(3), rep.auc5, rep.mean_matches))
    return rows


def ablation_table(rows: list[AblationRow]) -> str:
    lines = ["| configuration | PSRD | EAG | WSC | MMA@3 | AUC@5 | matches |",
             "|---|---|---|---|---|---|---|"]
    mark = {True: "x", False: ""}
    for r in rows:
        lines.append(f"| {r.name} | {mark[r.psrd]} | {mark[r.eag]} | {mark[r.wsc]} | {r.mma3:.4f} | {r.auc5:.4f} "
                     f"| {r.mean_matches:.1f} |")
    return "\n".join(lines) + "\n"
