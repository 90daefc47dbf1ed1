"""End-to-end pipeline: teacher training, guided sampling, block-wise
calibration orchestration, trajectory distillation data and fine-tuning.
"""

from __future__ import annotations

import copy
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .calibrate import HessianStats, LayerCalibJob, quantize_layer
from .codec import QuantConfig, avg_bits, reshape_for_quant
from .data import SyntheticDataset, TrajectoryDataset
from .errors import UsageError
from .nn import QuantConv2d, QuantLinear
from .optim import AdamState, adam_step
from .seeding import derive_rng
from .tensor import Tape, Tensor
from .unet import CalibrationPlan, MiniUNet, bits_report


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta forward process with cumulative signal fractions."""

    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        betas = np.linspace(self.beta_start, self.beta_end, self.num_steps,
                            dtype=np.float64)
        alpha_bar = np.cumprod(1.0 - betas)
        if not (np.all(np.diff(alpha_bar) < 0) and alpha_bar[0] > 0
                and alpha_bar[0] <= 1.0 and alpha_bar[-1] > 0):
            raise UsageError("schedule must keep alpha_bar strictly decreasing in (0,1]")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    def to_dict(self) -> dict:
        return {"num_steps": self.num_steps, "beta_start": self.beta_start,
                "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(**d)


def ddim_timesteps(num_train_steps: int, n_steps: int) -> np.ndarray:
    """Descending timesteps covering the full training range uniformly."""
    if n_steps <= 0:
        raise UsageError(f"sampler needs a positive step count, got {n_steps}")
    ts = np.unique(np.round(np.linspace(0, num_train_steps - 1, n_steps)).astype(np.int64))
    return ts[::-1].copy()


def guided_eps(eps_cond: np.ndarray, eps_uncond: np.ndarray, scale: float) -> np.ndarray:
    """Classifier-free guidance; the w=0 and w=1 endpoints are exact."""
    if scale == 0.0:
        return eps_uncond
    if scale == 1.0:
        return eps_cond
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ddim_sample(model: MiniUNet, schedule: NoiseSchedule, conditions,
                n_steps: int = 20, cfg_scale: float = 5.0, seed: int = 0,
                rng: np.random.Generator | None = None, record: bool = False):
    """Deterministic DDIM sampling with two-branch guidance.

    Returns (latents, records); records hold BOTH branch inputs per step as
    (x_t, t, cond_id, eps) tuples and are empty unless record=True.
    """
    spec = model.spec
    conditions = np.asarray(conditions, dtype=np.int64)
    batch = conditions.shape[0]
    if rng is None:
        rng = derive_rng(seed, "sample")
    x = rng.standard_normal(
        (batch, spec.in_channels, spec.latent_size, spec.latent_size)
    ).astype(model.dtype)
    ts = ddim_timesteps(schedule.num_steps, n_steps)
    null = np.full(batch, spec.null_class, dtype=np.int64)
    pure_uncond = cfg_scale == 0.0 and not record
    records = []
    for i, t in enumerate(ts):
        if pure_uncond:
            # w = 0 degenerates to plain unconditional sampling, bit for bit
            guided = model(Tensor(x), np.full(batch, t, dtype=np.int64), null).data
        else:
            x_in = Tensor(np.concatenate([x, x]))
            t_in = np.full(2 * batch, t, dtype=np.int64)
            cond_in = np.concatenate([conditions, null])
            eps = model(x_in, t_in, cond_in).data
            eps_c, eps_u = eps[:batch], eps[batch:]
            if record:
                records.append((x.copy(), int(t), conditions.copy(), eps_c.copy()))
                records.append((x.copy(), int(t), null.copy(), eps_u.copy()))
            guided = guided_eps(eps_c, eps_u, cfg_scale)
        ab_t = schedule.alpha_bar[t]
        ab_prev = schedule.alpha_bar[ts[i + 1]] if i + 1 < len(ts) else 1.0
        x0 = (x - math.sqrt(1.0 - ab_t) * guided) / math.sqrt(ab_t)
        x = (math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * guided).astype(model.dtype)
    return x, records


def records_to_dataset(records, meta=None) -> TrajectoryDataset:
    xs, ts, conds, eps = [], [], [], []
    for x, t, cond, e in records:
        xs.append(x)
        ts.append(np.full(x.shape[0], t, dtype=np.int64))
        conds.append(cond)
        eps.append(e)
    return TrajectoryDataset(
        x=np.concatenate(xs).astype(np.float32),
        t=np.concatenate(ts),
        cond=np.concatenate(conds).astype(np.int64),
        teacher_eps=np.concatenate(eps).astype(np.float32),
        meta=meta or {},
    )


# ---------------------------------------------------------------------------
# teacher pretraining
# ---------------------------------------------------------------------------

def pretrain_teacher(model: MiniUNet, dataset: SyntheticDataset,
                     schedule: NoiseSchedule, steps: int, batch_size: int = 32,
                     lr: float = 2e-3, seed: int = 0, log_cb=None):
    """Noise-prediction training on the synthetic set; returns loss history."""
    rng = derive_rng(seed, "teacher-train")
    params = model.parameters()
    state = AdamState(lr=lr)
    history = []
    for step in range(steps):
        idx = step * batch_size + np.arange(batch_size)
        x0, cond = dataset.batch(idx)
        t = rng.integers(0, schedule.num_steps, size=batch_size)
        noise = rng.standard_normal(x0.shape).astype(model.dtype)
        ab = schedule.alpha_bar[t].astype(model.dtype)[:, None, None, None]
        xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise
        with Tape() as tape:
            pred = model(Tensor(xt), t, cond)
            loss = T.mse(pred, Tensor(noise))
        grads = tape.backward(loss)
        adam_step(params, [grads.get(p, np.zeros_like(p.data)) for p in params], state)
        history.append(loss.item())
        if log_cb is not None:
            log_cb(step, history[-1])
    return history


# ---------------------------------------------------------------------------
# block-wise calibration
# ---------------------------------------------------------------------------

def calibration_conditions(n_conditions: int, num_classes: int) -> np.ndarray:
    return np.arange(n_conditions, dtype=np.int64) % num_classes


def collect_block_inputs(model: MiniUNet, plan: CalibrationPlan, subset_index: int,
                         schedule: NoiseSchedule, n_conditions: int = 32,
                         sampler_steps: int = 20, cfg_scale: float = 5.0,
                         seed: int = 0):
    """Hessian statistics for one subset from guided sampling with the
    current (partially quantized) model. Both CFG branches contribute."""
    if not 0 <= subset_index < len(plan.subsets):
        raise UsageError(f"subset index {subset_index} out of range")
    _, names = plan.subsets[subset_index]
    stats = {}
    try:
        for name in names:
            mod = model.get_module(name)
            d_flat = reshape_for_quant(mod.weight.data, mod.weight_kind, 1).shape[1]
            stats[name] = HessianStats(d_flat)
            mod.input_recorder = stats[name].accumulate
        conditions = calibration_conditions(n_conditions, model.spec.num_classes)
        ddim_sample(model, schedule, conditions, n_steps=sampler_steps,
                    cfg_scale=cfg_scale, rng=derive_rng(seed, "calib"))
    finally:
        model.clear_recorders()
    return {name: st.seal() for name, st in stats.items()}


def quantize_model(teacher: MiniUNet, plan: CalibrationPlan, config: QuantConfig,
                   schedule: NoiseSchedule, n_conditions: int = 32,
                   sampler_steps: int = 20, cfg_scale: float = 5.0,
                   seed: int = 0, jobs: int = 1, log_cb=None):
    """Quantize subsets in plan order, collecting activations from the model
    quantized so far; returns (student, report)."""
    teacher.clear_recorders()
    student = copy.deepcopy(teacher)
    records = []
    for i, (label, names) in enumerate(plan.subsets):
        stats = collect_block_inputs(
            student, plan, i, schedule, n_conditions=n_conditions,
            sampler_steps=sampler_steps, cfg_scale=cfg_scale, seed=seed,
        )
        jobs_list = []
        for name in names:
            mod = student.get_module(name)
            w = mod.weight.data
            grouped = reshape_for_quant(w, mod.weight_kind, config.group_size)
            jobs_list.append(LayerCalibJob(
                name=name, weight=np.asarray(grouped, dtype=np.float64),
                hessian=stats[name], config=config,
                kind=mod.weight_kind, shape=tuple(w.shape),
            ))
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(quantize_layer, jobs_list))
        else:
            results = [quantize_layer(j) for j in jobs_list]
        for name, (quant, record) in zip(names, results):
            mod = student.get_module(name)
            if mod.weight_kind == "conv":
                new = QuantConv2d(quant, mod.bias, stride=mod.stride, pad=mod.pad,
                                  dtype=student.dtype)
            else:
                new = QuantLinear(quant, mod.bias, dtype=student.dtype)
            student.set_module(name, new)
            record["subset"] = label
            records.append(record)
            if log_cb is not None:
                log_cb(record)
    report = {
        "layers": records,
        "avg_bits": avg_bits(bits_report(student)),
        "n_quantized": len(records),
    }
    return student, report


# ---------------------------------------------------------------------------
# distillation data and fine-tuning
# ---------------------------------------------------------------------------

def generate_trajectory_dataset(teacher: MiniUNet, schedule: NoiseSchedule,
                                n_records: int = 2048, sampler_steps: int = 20,
                                cfg_scale: float = 5.0, seed: int = 0) -> TrajectoryDataset:
    """Teacher sampling trajectories as per-branch distillation records."""
    per_condition = 2 * sampler_steps
    n_conditions = max(1, math.ceil(n_records / per_condition))
    conditions = calibration_conditions(n_conditions, teacher.spec.num_classes)
    _, records = ddim_sample(
        teacher, schedule, conditions, n_steps=sampler_steps, cfg_scale=cfg_scale,
        rng=derive_rng(seed, "trajectory"), record=True,
    )
    meta = {"n_conditions": int(n_conditions), "sampler_steps": int(sampler_steps),
            "cfg_scale": float(cfg_scale), "seed": int(seed)}
    return records_to_dataset(records, meta)


def _eval_batch_size(ds: TrajectoryDataset, batch_size) -> int:
    """Generation-aligned block size so replayed forwards reproduce stored
    predictions bit-exactly (GEMM rounding depends on batch shape)."""
    if batch_size is not None:
        return batch_size
    n_cond = ds.meta.get("n_conditions")
    return 2 * int(n_cond) if n_cond else 64


def epsilon_mse(model: MiniUNet, ds: TrajectoryDataset, batch_size: int | None = None) -> float:
    """Mean squared error of model predictions against stored teacher outputs."""
    batch_size = _eval_batch_size(ds, batch_size)
    total, count = 0.0, 0
    for start in range(0, len(ds), batch_size):
        sl = slice(start, min(start + batch_size, len(ds)))
        pred = model(Tensor(ds.x[sl]), ds.t[sl], ds.cond[sl]).data
        diff = pred.astype(np.float64) - ds.teacher_eps[sl].astype(np.float64)
        total += float(np.sum(diff * diff))
        count += diff.size
    return total / count


def per_timestep_mse(model: MiniUNet, ds: TrajectoryDataset, batch_size: int | None = None):
    """ε-MSE grouped by timestep, as {t: mse}."""
    batch_size = _eval_batch_size(ds, batch_size)
    sums, counts = {}, {}
    for start in range(0, len(ds), batch_size):
        sl = slice(start, min(start + batch_size, len(ds)))
        pred = model(Tensor(ds.x[sl]), ds.t[sl], ds.cond[sl]).data
        diff = (pred.astype(np.float64) - ds.teacher_eps[sl].astype(np.float64)) ** 2
        per_item = diff.reshape(diff.shape[0], -1)
        for i, t in enumerate(ds.t[sl]):
            sums[int(t)] = sums.get(int(t), 0.0) + per_item[i].sum()
            counts[int(t)] = counts.get(int(t), 0) + per_item.shape[1]
    return {t: sums[t] / counts[t] for t in sorted(sums)}


def finetune_global(student: MiniUNet, dataset: TrajectoryDataset, epochs: int,
                    batch_size: int = 32, lr: float = 1e-4, seed: int = 0,
                    held_out: TrajectoryDataset | None = None, log_cb=None):
    """Distill the student onto stored teacher predictions.

    Trains codebooks, scales and every dense parameter; codes are frozen by
    construction. Returns {train_loss: [...], held_out_mse: [...]}."""
    if batch_size < 32:
        warnings.warn(f"fine-tuning batch size {batch_size} < 32 weakens training",
                      stacklevel=2)
    if len(dataset) == 0:
        raise UsageError("fine-tuning dataset is empty")
    rng = derive_rng(seed, "finetune")
    params = student.parameters()
    state = AdamState(lr=lr)
    history = {"train_loss": [], "held_out_mse": []}
    if held_out is not None:
        history["held_out_mse"].append(epsilon_mse(student, held_out))
    for _ in range(epochs):
        perm = rng.permutation(len(dataset))
        for start in range(0, len(dataset), batch_size):
            idx = perm[start:start + batch_size]
            with Tape() as tape:
                pred = student(Tensor(dataset.x[idx]), dataset.t[idx], dataset.cond[idx])
                loss = T.mse(pred, Tensor(dataset.teacher_eps[idx]))
            grads = tape.backward(loss)
            adam_step(params, [grads.get(p, np.zeros_like(p.data)) for p in params],
                      state)
            history["train_loss"].append(loss.item())
            if log_cb is not None:
                log_cb(len(history["train_loss"]) - 1, history["train_loss"][-1])
        if held_out is not None:
            history["held_out_mse"].append(epsilon_mse(student, held_out))
    return history


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

PSNR_CAP_DB = 99.0


def psnr(reference: np.ndarray, candidate: np.ndarray) -> float:
    """Peak signal-to-noise ratio against the reference's value range."""
    mse_val = float(np.mean((reference.astype(np.float64) - candidate.astype(np.float64)) ** 2))
    if mse_val == 0.0:
        return PSNR_CAP_DB
    peak = float(reference.max() - reference.min())
    if peak == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(peak * peak / mse_val))


def eval_quantized(teacher: MiniUNet, student: MiniUNet, schedule: NoiseSchedule,
                   n_eval_conditions: int = 8, sampler_steps: int = 20,
                   cfg_scale: float = 5.0, seed: int = 0,
                   eval_records: int = 64):
    """Teacher/student fidelity metrics on shared trajectories and samples."""
    ds = generate_trajectory_dataset(
        teacher, schedule, n_records=eval_records, sampler_steps=sampler_steps,
        cfg_scale=cfg_scale, seed=derive_rng(seed, "eval-data").integers(2**31),
    )
    overall = epsilon_mse(student, ds)
    per_t = per_timestep_mse(student, ds)
    conditions = calibration_conditions(n_eval_conditions, teacher.spec.num_classes)
    rng_seed = int(derive_rng(seed, "eval-sample").integers(2**31))
    x_teacher, _ = ddim_sample(teacher, schedule, conditions, n_steps=sampler_steps,
                               cfg_scale=cfg_scale, rng=derive_rng(rng_seed, "s"))
    x_student, _ = ddim_sample(student, schedule, conditions, n_steps=sampler_steps,
                               cfg_scale=cfg_scale, rng=derive_rng(rng_seed, "s"))
    return {
        "eps_mse": overall,
        "per_timestep_mse": per_t,
        "psnr_db": psnr(x_teacher, x_student),
        "avg_bits": avg_bits(bits_report(student)),
    }
