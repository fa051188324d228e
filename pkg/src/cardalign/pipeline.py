"""Stage orchestration: synth -> pretrain -> train-cmr -> align -> eval.

Every stage is a function of one RunConfig, writes its artifacts under the
config's output directory, drops a frozen copy of the resolved config beside
them, and derives all randomness from (config seed, stage tag), so re-running
a stage from its frozen config reproduces the outputs byte for byte
(single-thread, 64-bit mode).
"""
from __future__ import annotations

import contextlib
import dataclasses
import json
import math
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from cardalign import container
from cardalign import tensor as T
from cardalign.align import AlignBatch, ProjectionHead, dual_phase_terms, info_nce, retrieval_topk
from cardalign.cohort import (
    Cohort,
    CohortConfig,
    PHENOTYPE_FIELDS,
    build_cohort,
    qrs_duration_ms,
)
from cardalign.config import (
    FUNCTIONAL_TASKS,
    RunConfig,
    to_json,
)
from cardalign.downstream import HeadTrainConfig, TargetScaler, TaskSpec, train_head
from cardalign.signals import EcgRecord, preprocess
from cardalign.tensor import Tensor
from cardalign.training import AdamW, EarlyStop, ScheduleConfig, checkpoint_name, lr_at
from cardalign.vit import MaeModel, VitConfig, batch_plans, count_params, unpatchify
from cardalign.volnet import CmrEncoderConfig, VolumeEncoder

# stage tags for seed derivation
(_TAG_MAE_INIT, _TAG_MAE_SHUFFLE, _TAG_MAE_MASK, _TAG_MAE_VAL) = (100, 101, 102, 103)
(_TAG_CMR_INIT, _TAG_CMR_SHUFFLE) = (110, 112)
(_TAG_ALIGN_HEADS, _TAG_ALIGN_SHUFFLE) = (120, 121)
_TAG_HEADS = 130
_TAG_ABLATE = 140


class PipelineError(RuntimeError):
    pass


def _rng(cfg_seed: int, tag: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(cfg_seed), int(tag), *map(int, extra)]))


def _seed_int(cfg_seed: int, tag: int, *extra: int) -> int:
    return int(np.random.SeedSequence([int(cfg_seed), int(tag), *map(int, extra)]).generate_state(1)[0])


@contextlib.contextmanager
def _stage_context(cfg: RunConfig):
    T.set_default_dtype(cfg.precision)
    limit = cfg.threads if cfg.threads and cfg.threads > 0 else None
    try:
        with threadpool_limits(limits=limit):
            yield
    finally:
        T.set_default_dtype("f64")


def _out(cfg: RunConfig) -> Path:
    return Path(cfg.out_dir)


def _freeze_config(cfg: RunConfig, stage_dir: Path) -> None:
    stage_dir.mkdir(parents=True, exist_ok=True)
    (stage_dir / "config.json").write_text(to_json(cfg) + "\n")


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise PipelineError(f"missing required artifact {path} ({hint})")
    return path


def _fmt(x) -> str:
    return repr(float(x))


def _load_into(params: dict, arrays: dict, prefix: str = "") -> None:
    for name, p in params.items():
        key = prefix + name
        if key not in arrays:
            raise PipelineError(f"checkpoint is missing parameter {key!r}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(p.shape):
            raise PipelineError(f"checkpoint parameter {key!r} has shape {arr.shape}, expected {p.shape}")
        params[name] = Tensor(arr, requires_grad=p.requires_grad, dtype=p.dtype)


# ---------------------------------------------------------------------------
# data access
# ---------------------------------------------------------------------------


class EcgTokenSource:
    """Preprocessing cache: raw cohort ECG -> filtered leads on disk (f32)."""

    def __init__(self, cfg: RunConfig, cohort: Cohort):
        self.cfg = cfg
        self.cohort = cohort
        self.prep_dir = _out(cfg) / "prep"

    def _path(self, index: int) -> Path:
        return self.prep_dir / f"{self.cohort.ids[index]}.prep.bin"

    def ensure(self, indices) -> None:
        self.prep_dir.mkdir(parents=True, exist_ok=True)
        pp = self.cfg.preprocess
        for i in indices:
            path = self._path(int(i))
            if path.exists():
                continue
            record = EcgRecord(self.cohort.ecg_raw(int(i)), subject_id=self.cohort.ids[int(i)])
            clean = preprocess(record, highpass_hz=pp.highpass_hz, notch_hz=pp.notch_hz,
                               notch_q=pp.notch_q, sg_window=pp.sg_window, sg_order=pp.sg_order)
            container.write_tensor(path, clean.leads.astype(np.float32))

    def leads(self, indices) -> np.ndarray:
        out = np.empty((len(indices), 12, 5000), dtype=np.float64)
        for row, i in enumerate(indices):
            out[row] = container.read_tensor(self._path(int(i))).astype(np.float64)
        return out

    def tokens(self, indices, patch_len: int) -> np.ndarray:
        arr = self.leads(indices)
        b = arr.shape[0]
        count = 5000 // patch_len
        return arr.reshape(b, 12, count, patch_len).transpose(0, 2, 1, 3).reshape(b, count, 12 * patch_len)


def _load_volumes(cohort: Cohort, indices, phase: str) -> np.ndarray:
    first = cohort.volume_array(int(indices[0]), phase)
    out = np.empty((len(indices),) + first.shape, dtype=np.float64)
    out[0] = first
    for row, i in enumerate(indices[1:], start=1):
        out[row] = cohort.volume_array(int(i), phase)
    return out


def _batched(indices, batch_size: int):
    for start in range(0, len(indices), batch_size):
        yield indices[start : start + batch_size]


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def run_synth(cfg: RunConfig) -> Path:
    """Generate the cohort directory."""
    stage_dir = _out(cfg) / "cohort"
    with _stage_context(cfg):
        stage_dir.mkdir(parents=True, exist_ok=True)
        build_cohort(cfg.cohort, stage_dir)
        _freeze_config(cfg, stage_dir)
    return stage_dir


def _cohort(cfg: RunConfig) -> Cohort:
    path = _require(_out(cfg) / "cohort" / "manifest.txt", "run the synth stage first")
    return Cohort(path.parent)


# ---------------------------------------------------------------------------
# MAE pretraining
# ---------------------------------------------------------------------------


def run_pretrain_ecg(cfg: RunConfig) -> Path:
    """Self-supervised masked-reconstruction pretraining of the ECG encoder."""
    stage_dir = _out(cfg) / "mae"
    with _stage_context(cfg):
        cohort = _cohort(cfg)
        source = EcgTokenSource(cfg, cohort)
        train_idx = cohort.indices_for("train")
        val_idx = cohort.indices_for("val")
        source.ensure(np.concatenate([train_idx, val_idx]))

        model = MaeModel(cfg.vit, _rng(cfg.seed, _TAG_MAE_INIT))
        optim = AdamW(model.params, weight_decay=cfg.mae_train.weight_decay)
        tr = cfg.mae_train
        steps_per_epoch = max(1, math.ceil(len(train_idx) / tr.batch_size))
        schedule = ScheduleConfig(base_lr=tr.base_lr, steps_per_epoch=steps_per_epoch,
                                  warmup_epochs=tr.warmup_epochs, max_epochs=tr.max_epochs,
                                  min_lr=tr.min_lr)
        stopper = EarlyStop(patience=tr.patience, mode="min")
        val_tokens = source.tokens(val_idx, cfg.vit.patch_len)
        val_plans = [  # fixed masks so the validation metric is comparable across epochs
            batch_plans(cfg.vit, _seed_int(cfg.seed, _TAG_MAE_VAL, i), 1)[0]
            for i in range(len(val_idx))
        ]

        def val_loss() -> float:
            total = 0.0
            for chunk in _batched(np.arange(len(val_idx)), tr.batch_size):
                loss, _ = model.masked_loss(val_tokens[chunk], [val_plans[i] for i in chunk])
                total += float(loss.data) * len(chunk)
            return total / len(val_idx)

        stage_dir.mkdir(parents=True, exist_ok=True)
        log_rows = ["step,epoch,lr,train_loss,val_metric"]
        history = []
        best_params = None
        step = 0
        for epoch in range(1, tr.max_epochs + 1):
            order = _rng(cfg.seed, _TAG_MAE_SHUFFLE, epoch).permutation(train_idx)
            epoch_loss = 0.0
            for batch in _batched(order, tr.batch_size):
                tokens = source.tokens(batch, cfg.vit.patch_len)
                plans = batch_plans(cfg.vit, _seed_int(cfg.seed, _TAG_MAE_MASK, step), len(batch))
                lr = lr_at(step, schedule)
                with T.tape():
                    loss, _ = model.masked_loss(tokens, plans)
                    grads = T.grads_by_name(T.backward(loss), model.params)
                optim.step(grads, lr=lr)
                epoch_loss += float(loss.data) * len(batch)
                step += 1
            vloss = val_loss()
            history.append(vloss)
            log_rows.append(f"{step},{epoch},{_fmt(lr)},{_fmt(epoch_loss / len(train_idx))},{_fmt(vloss)}")
            decision = stopper.update(vloss, epoch)
            if stopper.best_epoch == epoch:
                best_params = {k: v.data.copy() for k, v in model.params.items()}
                container.write_checkpoint(
                    stage_dir / checkpoint_name("mae", epoch, vloss),
                    {k: v.data for k, v in model.params.items()},
                    _manifest(cfg, step=step, metric_history=history),
                )
            if decision == "stop":
                break
        container.write_checkpoint(stage_dir / "best.ckpt", best_params,
                                   _manifest(cfg, step=step, metric_history=history,
                                             best_epoch=stopper.best_epoch,
                                             best_metric=stopper.best_metric))
        (stage_dir / "log.csv").write_text("\n".join(log_rows) + "\n")
        for k, v in best_params.items():
            model.params[k] = Tensor(v, requires_grad=True)
        _write_recon_panel(stage_dir / "recon_panel.csv", model, val_tokens[0], cfg.vit,
                           _seed_int(cfg.seed, _TAG_MAE_VAL, 0))
        _freeze_config(cfg, stage_dir)
    return stage_dir


def _manifest(cfg: RunConfig, **extra) -> dict:
    out = {"config": to_json(cfg).replace("\n", " "), "seed": str(cfg.seed)}
    for k, v in extra.items():
        out[k] = json.dumps(v) if not isinstance(v, str) else v
    return out


def _write_recon_panel(path: Path, model: MaeModel, tokens: np.ndarray, vit_cfg: VitConfig,
                       seed: int) -> None:
    """Original vs reconstructed waveforms for one held-out record."""
    plans = batch_plans(vit_cfg, seed, 1)
    _, recon_tokens = model.masked_loss(tokens[None], plans)
    orig = unpatchify(tokens, vit_cfg.patch_len)
    recon = unpatchify(recon_tokens[0], vit_cfg.patch_len)
    header = ["t"] + [f"orig_lead{j}" for j in range(12)] + [f"recon_lead{j}" for j in range(12)]
    rows = [",".join(header)]
    for s in range(orig.shape[1]):
        vals = [_fmt(s / 500.0)] + [_fmt(v) for v in orig[:, s]] + [_fmt(v) for v in recon[:, s]]
        rows.append(",".join(vals))
    path.write_text("\n".join(rows) + "\n")


# ---------------------------------------------------------------------------
# CMR encoder training
# ---------------------------------------------------------------------------


def _cmr_config(cfg: RunConfig, phase: str) -> CmrEncoderConfig:
    trunk = cfg.cmr
    n_stages = len(trunk.stage_widths)
    return CmrEncoderConfig(
        phase=phase,
        stage_widths=tuple(trunk.stage_widths),
        blocks_per_stage=tuple(trunk.blocks_per_stage),
        embed_dim=trunk.embed_dim,
        stage_strides=CmrEncoderConfig.__dataclass_fields__["stage_strides"].default[:n_stages],
    )


def run_train_cmr(cfg: RunConfig, phase: str) -> Path:
    """Supervised phenotype-regression training of one phase encoder."""
    phase = phase.upper()
    if phase not in ("ED", "ES"):
        raise PipelineError(f"phase must be ed or es, got {phase!r}")
    stage_dir = _out(cfg) / f"cmr_{phase.lower()}"
    with _stage_context(cfg):
        cohort = _cohort(cfg)
        train_idx = cohort.indices_for("train")
        val_idx = cohort.indices_for("val")
        scaler = TargetScaler().fit(cohort.phenotype_matrix(train_idx))
        std_train = scaler.transform(cohort.phenotype_matrix(train_idx))
        std_val = scaler.transform(cohort.phenotype_matrix(val_idx))

        phase_tag = 0 if phase == "ED" else 1
        encoder = VolumeEncoder(_cmr_config(cfg, phase), _rng(cfg.seed, _TAG_CMR_INIT, phase_tag))
        optim = AdamW(encoder.params, weight_decay=cfg.cmr_train.weight_decay)
        tr = cfg.cmr_train
        steps_per_epoch = max(1, math.ceil(len(train_idx) / tr.batch_size))
        schedule = ScheduleConfig(base_lr=tr.base_lr, steps_per_epoch=steps_per_epoch,
                                  warmup_epochs=tr.warmup_epochs, max_epochs=tr.max_epochs,
                                  min_lr=tr.min_lr)
        stopper = EarlyStop(patience=tr.patience, mode="min")
        val_vols = _load_volumes(cohort, val_idx, phase)

        def val_mse() -> float:
            preds = []
            for chunk in _batched(np.arange(len(val_idx)), tr.batch_size):
                emb = encoder.encode(T.constant(val_vols[chunk])).data
                preds.append(emb @ encoder.params["reg.w"].data + encoder.params["reg.b"].data)
            preds = np.concatenate(preds)
            return float(((preds - std_val) ** 2).mean())

        stage_dir.mkdir(parents=True, exist_ok=True)
        pos_of = {int(i): row for row, i in enumerate(train_idx)}
        log_rows = ["step,epoch,lr,train_loss,val_metric"]
        log_rows_pre = f"0,0,{_fmt(0.0)},,{_fmt(val_mse())}"  # epoch-0 reference
        log_rows.append(log_rows_pre)
        history = []
        best_params = None
        step = 0
        for epoch in range(1, tr.max_epochs + 1):
            order = _rng(cfg.seed, _TAG_CMR_SHUFFLE, phase_tag, epoch).permutation(train_idx)
            epoch_loss = 0.0
            for batch in _batched(order, tr.batch_size):
                vols = _load_volumes(cohort, batch, phase)
                targets = std_train[[pos_of[int(i)] for i in batch]]
                lr = lr_at(step, schedule)
                with T.tape():
                    emb = encoder.encode(T.constant(vols))
                    loss = encoder.regression_loss(emb, targets)
                    grads = T.grads_by_name(T.backward(loss), encoder.params)
                optim.step(grads, lr=lr)
                epoch_loss += float(loss.data) * len(batch)
                step += 1
            vloss = val_mse()
            history.append(vloss)
            log_rows.append(f"{step},{epoch},{_fmt(lr)},{_fmt(epoch_loss / len(train_idx))},{_fmt(vloss)}")
            decision = stopper.update(vloss, epoch)
            if stopper.best_epoch == epoch:
                best_params = {k: v.data.copy() for k, v in encoder.params.items()}
                container.write_checkpoint(
                    stage_dir / checkpoint_name(f"cmr-{phase.lower()}", epoch, vloss),
                    {k: v.data for k, v in encoder.params.items()},
                    _manifest(cfg, step=step, metric_history=history, phase=phase,
                              scaler_mean=list(scaler.mean), scaler_std=list(scaler.std)),
                )
            if decision == "stop":
                break
        container.write_checkpoint(stage_dir / "best.ckpt", best_params,
                                   _manifest(cfg, step=step, metric_history=history, phase=phase,
                                             best_epoch=stopper.best_epoch, best_metric=stopper.best_metric,
                                             scaler_mean=list(scaler.mean), scaler_std=list(scaler.std)))
        (stage_dir / "log.csv").write_text("\n".join(log_rows) + "\n")
        _freeze_config(cfg, stage_dir)
    return stage_dir


# ---------------------------------------------------------------------------
# alignment
# ---------------------------------------------------------------------------


def _load_mae(cfg: RunConfig, ckpt_path: Path, prefix: str = "") -> MaeModel:
    model = MaeModel(cfg.vit, _rng(cfg.seed, _TAG_MAE_INIT))
    arrays, _ = container.read_checkpoint(ckpt_path)
    if prefix:
        enc_names = set(model.encoder_param_names())
        arrays = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        # aligned checkpoints store the encoder trunk only; decoder parameters
        # keep their init (the decoder is discarded downstream)
        arrays = {k: v for k, v in arrays.items() if k in enc_names}
        partial = dict(model.params)
        for k in list(partial):
            if k not in arrays:
                partial.pop(k)
        _load_into(partial, arrays)
        for k, v in partial.items():
            model.params[k] = v
    else:
        _load_into(model.params, arrays)
    return model


def _load_cmr(cfg: RunConfig, phase: str) -> tuple[VolumeEncoder, Path]:
    stage_dir = _out(cfg) / f"cmr_{phase.lower()}"
    ckpt = _require(stage_dir / "best.ckpt", f"run train-cmr --phase {phase.lower()} first")
    phase_tag = 0 if phase == "ED" else 1
    encoder = VolumeEncoder(_cmr_config(cfg, phase), _rng(cfg.seed, _TAG_CMR_INIT, phase_tag))
    arrays, _ = container.read_checkpoint(ckpt)
    _load_into(encoder.params, arrays)
    return encoder, ckpt


def _freeze(encoder: VolumeEncoder) -> None:
    for name, p in encoder.params.items():
        encoder.params[name] = Tensor(p.data, requires_grad=False, dtype=p.dtype)


def _encode_volumes(encoder: VolumeEncoder, cohort: Cohort, indices, phase: str,
                    batch_size: int = 32) -> np.ndarray:
    outs = []
    for batch in _batched(indices, batch_size):
        vols = _load_volumes(cohort, batch, phase)
        outs.append(encoder.encode(T.constant(vols)).data)
    return np.concatenate(outs)


def _encode_ecg(model: MaeModel, source: EcgTokenSource, indices, patch_len: int,
                batch_size: int = 64) -> np.ndarray:
    outs = []
    for batch in _batched(indices, batch_size):
        tokens = source.tokens(batch, patch_len)
        outs.append(model.encode(T.constant(tokens)).data)
    return np.concatenate(outs)


def run_align(cfg: RunConfig, mode: str | None = None) -> Path:
    """Contrastive alignment of the ECG encoder to the frozen volume encoders."""
    mode = mode or cfg.align.mode
    if mode not in ("none", "ed_only", "dual_phase"):
        raise PipelineError(f"alignment mode must be none, ed_only, or dual_phase, got {mode!r}")
    stage_dir = _out(cfg) / f"align_{mode}"
    if mode == "none":
        # baseline: no alignment; downstream reads the MAE checkpoint directly
        with _stage_context(cfg):
            _require(_out(cfg) / "mae" / "best.ckpt", "run pretrain-ecg first")
            stage_dir.mkdir(parents=True, exist_ok=True)
            (stage_dir / "SKIPPED.txt").write_text("alignment mode none: baseline embeddings\n")
            _freeze_config(cfg, stage_dir)
        return stage_dir

    with _stage_context(cfg):
        cohort = _cohort(cfg)
        mae_ckpt = _require(_out(cfg) / "mae" / "best.ckpt", "run pretrain-ecg first")
        model = _load_mae(cfg, mae_ckpt)
        enc_ed, _ = _load_cmr(cfg, "ED")
        enc_es, _ = _load_cmr(cfg, "ES")
        _freeze(enc_ed)
        _freeze(enc_es)
        checksum_before = (enc_ed.checksum(), enc_es.checksum())

        source = EcgTokenSource(cfg, cohort)
        train_idx = cohort.indices_for("train")
        val_idx = cohort.indices_for("val")
        source.ensure(np.concatenate([train_idx, val_idx]))

        # frozen encoders: volume embeddings are fixed for the whole run
        z_ed_train = _encode_volumes(enc_ed, cohort, train_idx, "ED")
        z_es_train = _encode_volumes(enc_es, cohort, train_idx, "ES")
        z_ed_val = _encode_volumes(enc_ed, cohort, val_idx, "ED")
        z_es_val = _encode_volumes(enc_es, cohort, val_idx, "ES")
        row_of = {int(i): row for row, i in enumerate(train_idx)}

        al = cfg.align
        hrng = _rng(cfg.seed, _TAG_ALIGN_HEADS)
        h_ecg = ProjectionHead(cfg.vit.embed_dim, hrng, al.proj_hidden, al.proj_dim)
        h_ed = ProjectionHead(cfg.cmr.embed_dim, hrng, al.proj_hidden, al.proj_dim)
        h_es = ProjectionHead(cfg.cmr.embed_dim, hrng, al.proj_hidden, al.proj_dim)

        bundle: dict[str, Tensor] = {}
        for k in model.encoder_param_names():
            bundle[f"enc.{k}"] = model.params[k]
        for k, v in h_ecg.params.items():
            bundle[f"hecg.{k}"] = v
        for k, v in h_ed.params.items():
            bundle[f"hed.{k}"] = v
        if mode == "dual_phase":
            for k, v in h_es.params.items():
                bundle[f"hes.{k}"] = v
        log_tau = None
        if al.learnable_tau:
            log_tau = Tensor(np.log(np.asarray(al.tau)), requires_grad=True)
            bundle["log_tau"] = log_tau

        def scatter() -> None:
            nonlocal log_tau
            for key, tensor in bundle.items():
                group, _, name = key.partition(".")
                if group == "enc":
                    model.params[name] = tensor
                elif group == "hecg":
                    h_ecg.params[name] = tensor
                elif group == "hed":
                    h_ed.params[name] = tensor
                elif group == "hes":
                    h_es.params[name] = tensor
            if al.learnable_tau:
                log_tau = bundle["log_tau"]

        def current_tau():
            return T.exp(log_tau) if al.learnable_tau else al.tau

        def batch_loss(z_ecg, z_ed_raw, z_es_raw):
            p_ecg = h_ecg.project(z_ecg)
            p_ed = h_ed.project(T.constant(z_ed_raw))
            tau = current_tau()
            if mode == "ed_only":
                return info_nce(p_ecg, p_ed, tau), (None, None, None)
            p_es = h_es.project(T.constant(z_es_raw))
            t1 = info_nce(p_ecg, p_ed, tau)
            t2 = info_nce(p_ecg, p_es, tau)
            t3 = info_nce(p_ed, p_es, tau)
            total = T.mul(T.add(T.add(t1, t2), t3), 1.0 / 3.0)
            if al.symmetric:
                r1 = info_nce(p_ed, p_ecg, tau)
                r2 = info_nce(p_es, p_ecg, tau)
                r3 = info_nce(p_es, p_ed, tau)
                rev = T.mul(T.add(T.add(r1, r2), r3), 1.0 / 3.0)
                total = T.mul(T.add(total, rev), 0.5)
            return total, (t1, t2, t3)

        def evaluate() -> tuple[float, float, float]:
            z_ecg_val = _encode_ecg(model, source, val_idx, cfg.vit.patch_len)
            p_ecg = h_ecg.project(T.constant(z_ecg_val)).data
            p_ed = h_ed.project(T.constant(z_ed_val)).data
            if mode == "ed_only":
                vloss = float(info_nce(p_ecg, p_ed, al.tau).data)
            else:
                p_es = h_es.project(T.constant(z_es_val)).data
                batch = AlignBatch(T.constant(p_ecg), T.constant(p_ed), T.constant(p_es), al.tau)
                t1, t2, t3 = dual_phase_terms(batch)
                vloss = (float(t1.data) + float(t2.data) + float(t3.data)) / 3.0
            top1 = retrieval_topk(p_ecg, p_ed, 1)
            top5 = retrieval_topk(p_ecg, p_ed, min(5, len(val_idx)))
            return vloss, top1, top5

        optim = AdamW(bundle, weight_decay=al.weight_decay)
        steps_per_epoch = max(1, math.ceil(len(train_idx) / al.batch_size))
        schedule = ScheduleConfig(base_lr=al.base_lr, steps_per_epoch=steps_per_epoch,
                                  warmup_epochs=al.warmup_epochs, max_epochs=al.max_epochs)
        stopper = EarlyStop(patience=al.patience, mode="min")

        stage_dir.mkdir(parents=True, exist_ok=True)
        log_rows = ["epoch,train_loss,loss_ecg_ed,loss_ecg_es,loss_ed_es,val_loss,val_top1,val_top5"]
        vloss0, top1_0, top5_0 = evaluate()  # pre-alignment reference row
        log_rows.append(f"0,,,,,{_fmt(vloss0)},{_fmt(top1_0)},{_fmt(top5_0)}")
        history = [vloss0]
        best_params = None
        step = 0
        frozen_params = list(enc_ed.params.values()) + list(enc_es.params.values())
        for epoch in range(1, al.max_epochs + 1):
            order = _rng(cfg.seed, _TAG_ALIGN_SHUFFLE, epoch).permutation(train_idx)
            sums = np.zeros(4)
            counts = 0
            for batch in _batched(order, al.batch_size):
                rows = [row_of[int(i)] for i in batch]
                tokens = source.tokens(batch, cfg.vit.patch_len)
                lr = lr_at(step, schedule)
                with T.tape():
                    z_ecg = model.encode(T.constant(tokens))
                    loss, terms = batch_loss(z_ecg, z_ed_train[rows], z_es_train[rows])
                    grads = T.grads_by_name(T.backward(loss), bundle)
                    for p in frozen_params:  # freeze contract: not merely zero grads
                        if p._node is not None:
                            raise PipelineError("frozen volume encoder parameter appeared on the tape")
                optim.step(grads, lr=lr)
                scatter()
                sums[0] += float(loss.data) * len(batch)
                if terms[0] is not None:
                    sums[1:] += [float(t.data) * len(batch) for t in terms]
                counts += len(batch)
                step += 1
            vloss, top1, top5 = evaluate()
            history.append(vloss)
            comp = [("" if mode == "ed_only" else _fmt(sums[j] / counts)) for j in (1, 2, 3)]
            if mode == "ed_only":
                comp[0] = _fmt(sums[0] / counts)
            log_rows.append(
                f"{epoch},{_fmt(sums[0] / counts)},{comp[0]},{comp[1]},{comp[2]},"
                f"{_fmt(vloss)},{_fmt(top1)},{_fmt(top5)}"
            )
            decision = stopper.update(vloss, epoch)
            if stopper.best_epoch == epoch:
                best_params = {k: v.data.copy() for k, v in bundle.items()}
                container.write_checkpoint(
                    stage_dir / checkpoint_name(f"align-{mode}", epoch, vloss),
                    best_params, _manifest(cfg, step=step, metric_history=history, mode=mode),
                )
            if decision == "stop":
                break

        checksum_after = (enc_ed.checksum(), enc_es.checksum())
        if checksum_after != checksum_before:
            raise PipelineError("frozen volume encoder parameters changed during alignment")
        container.write_checkpoint(
            stage_dir / "best.ckpt", best_params,
            _manifest(cfg, step=step, metric_history=history, mode=mode,
                      best_epoch=stopper.best_epoch, best_metric=stopper.best_metric,
                      frozen_checksum_ed=checksum_before[0], frozen_checksum_es=checksum_before[1],
                      frozen_unchanged=True),
        )
        (stage_dir / "metrics.csv").write_text("\n".join(log_rows) + "\n")
        _freeze_config(cfg, stage_dir)
    return stage_dir


# ---------------------------------------------------------------------------
# downstream heads and evaluation
# ---------------------------------------------------------------------------


def _encoder_for_source(cfg: RunConfig, source: str) -> MaeModel:
    if source == "none":
        ckpt = _require(_out(cfg) / "mae" / "best.ckpt", "run pretrain-ecg first")
        return _load_mae(cfg, ckpt)
    ckpt = _require(_out(cfg) / f"align_{source}" / "best.ckpt", f"run align --mode {source} first")
    return _load_mae(cfg, ckpt, prefix="enc.")


def _task_targets(cohort: Cohort, task: TaskSpec) -> np.ndarray:
    if task.kind == "regression":
        if task.target not in cohort.phenotypes:
            raise PipelineError(f"unknown phenotype target {task.target!r}")
        return cohort.phenotypes[task.target]
    if task.target not in cohort.outcomes:
        raise PipelineError(f"unknown outcome target {task.target!r}")
    return cohort.outcomes[task.target].astype(np.float64)


def _embeddings_by_split(cfg: RunConfig, source_name: str, cohort: Cohort) -> dict:
    model = _encoder_for_source(cfg, source_name)
    token_source = EcgTokenSource(cfg, cohort)
    out = {}
    for split in ("train", "val", "test"):
        idx = cohort.indices_for(split)
        token_source.ensure(idx)
        out[split] = _encode_ecg(model, token_source, idx, cfg.vit.patch_len)
    return out


def eval_source(cfg: RunConfig, source_name: str) -> list[dict]:
    """Train one head per task on a source's frozen embeddings."""
    cohort = _cohort(cfg)
    embeddings = _embeddings_by_split(cfg, source_name, cohort)
    rows = []
    for t_index, task in enumerate(cfg.tasks):
        targets = _task_targets(cohort, task)
        split_targets = {s: targets[cohort.indices_for(s)] for s in ("train", "val", "test")}
        head_cfg = dataclasses.replace(cfg.heads, seed=_seed_int(cfg.seed, _TAG_HEADS, t_index))
        result = train_head(task, embeddings, split_targets, head_cfg)
        rows.append({
            "task_id": task.task_id, "kind": task.kind, "metric_name": task.metric,
            "value": result.test_metric, "n_test": result.n_test,
            "seed": head_cfg.seed, "embedding_source": source_name,
        })
    return rows


_RESULT_COLUMNS = ("task_id", "kind", "metric_name", "value", "n_test", "seed", "embedding_source")


def _write_results(path: Path, rows: list[dict]) -> None:
    lines = [",".join(_RESULT_COLUMNS)]
    for row in rows:
        lines.append(",".join(
            _fmt(row[c]) if c == "value" else str(row[c]) for c in _RESULT_COLUMNS
        ))
    path.write_text("\n".join(lines) + "\n")


def run_train_heads(cfg: RunConfig, source_name: str) -> Path:
    stage_dir = _out(cfg) / f"heads_{source_name}"
    with _stage_context(cfg):
        rows = eval_source(cfg, source_name)
        stage_dir.mkdir(parents=True, exist_ok=True)
        _write_results(stage_dir / "results.csv", rows)
        _freeze_config(cfg, stage_dir)
    return stage_dir


def run_eval(cfg: RunConfig) -> Path:
    """Full task-by-source table plus the functional uplift summary."""
    out_dir = _out(cfg)
    with _stage_context(cfg):
        rows = []
        for source_name in cfg.eval_sources:
            rows.extend(eval_source(cfg, source_name))
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_results(out_dir / "results.csv", rows)
        summary = summarize_uplift(rows)
        (out_dir / "summary.txt").write_text(summary + "\n")
        _freeze_config(cfg, out_dir)
        print(summary)
    return out_dir / "results.csv"


def summarize_uplift(rows: list[dict]) -> str:
    by = {(r["embedding_source"], r["task_id"]): r["value"] for r in rows}
    lines = []
    ups = []
    for task in FUNCTIONAL_TASKS:
        base = by.get(("none", task))
        dual = by.get(("dual_phase", task))
        if base is None or dual is None:
            continue
        pct = (dual - base) / abs(base) * 100.0 if base != 0 else float("nan")
        ups.append(pct)
        lines.append(f"functional {task}: baseline R2 {base:.4f} -> dual-phase {dual:.4f} ({pct:+.1f}%)")
    if ups:
        lines.append(f"functional mean uplift of dual_phase over baseline: {np.mean(ups):+.1f}%")
    return "\n".join(lines) if lines else "no functional uplift rows available"


# ---------------------------------------------------------------------------
# capacity ladder ablation
# ---------------------------------------------------------------------------


def run_ablate(cfg: RunConfig) -> Path:
    """Train each ViT preset briefly, probe frozen embeddings for ECG-derived
    quantities, and tabulate parameter counts."""
    out_dir = _out(cfg)
    with _stage_context(cfg):
        cohort = _cohort(cfg)
        hr = cohort.phenotypes["heart_rate"]
        probes = {
            "qrs_count": np.round(10.0 * hr / 60.0),
            "qrs_duration": 70.0 + 0.25 * cohort.phenotypes["lv_mass"],
            "heart_rate": hr,
        }
        header = ["preset", "layers", "heads", "embed_dim", "params"] + [f"r2_{p}" for p in probes]
        lines = [",".join(header)]
        for p_index, preset in enumerate(cfg.ablate.presets):
            vit_cfg = VitConfig(layers=preset.layers, heads=preset.heads,
                                embed_dim=preset.embed_dim, patch_len=preset.patch_len)
            sub = dataclasses.replace(
                cfg,
                vit=vit_cfg,
                out_dir=str(out_dir / "ablate" / preset.name),
                mae_train=dataclasses.replace(cfg.mae_train, max_epochs=cfg.ablate.max_epochs),
            )
            (Path(sub.out_dir) / "cohort").mkdir(parents=True, exist_ok=True)
            _link_cohort(out_dir / "cohort", Path(sub.out_dir) / "cohort")
            run_pretrain_ecg(sub)
            embeddings = _embeddings_by_split(sub, "none", cohort)
            row = [preset.name, str(preset.layers), str(preset.heads), str(preset.embed_dim),
                   str(count_params(vit_cfg))]
            for t_index, (probe, values) in enumerate(probes.items()):
                split_targets = {s: values[cohort.indices_for(s)] for s in ("train", "val", "test")}
                head_cfg = dataclasses.replace(
                    cfg.heads, seed=_seed_int(cfg.seed, _TAG_ABLATE, p_index, t_index))
                result = train_head(TaskSpec(probe, "regression", probe), embeddings,
                                    split_targets, head_cfg)
                row.append(_fmt(result.test_metric))
            lines.append(",".join(row))
        (out_dir / "ablate.csv").write_text("\n".join(lines) + "\n")
        _freeze_config(cfg, out_dir)
    return out_dir / "ablate.csv"


def _link_cohort(src: Path, dst: Path) -> None:
    """Expose an existing cohort inside a sub-run directory (copy-free)."""
    for item in ("manifest.txt", "phenotypes.csv", "cohort_config.json", "subjects"):
        target = dst / item
        if not target.exists():
            target.symlink_to((src / item).resolve())
