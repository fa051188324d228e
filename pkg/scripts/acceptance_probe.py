"""Development driver: run the acceptance-scale pipeline and report the
criterion-4/5 quantities. Not part of the package."""
import argparse
import json
import shutil
import time
from pathlib import Path

from cardalign import config as C
from cardalign import pipeline as P
from cardalign.cohort import CohortConfig
from cardalign.config import AlignConfig, CmrTrunkConfig, StageTrainConfig
from cardalign.downstream import HeadTrainConfig, TaskSpec
from cardalign.vit import VitConfig


def acceptance_config(out_dir: str, seed: int = 20) -> C.RunConfig:
    return C.RunConfig(
        seed=seed,
        out_dir=out_dir,
        cohort=CohortConfig(n_subjects=2000, split_ratios=(0.8, 0.1, 0.1), master_seed=seed),
        vit=VitConfig(layers=3, heads=4, embed_dim=64, patch_len=50),
        cmr=CmrTrunkConfig(stage_widths=(8, 16, 32, 64), blocks_per_stage=(1, 1, 1, 1), embed_dim=256),
        mae_train=StageTrainConfig(base_lr=1e-3, batch_size=64, warmup_epochs=1, max_epochs=8),
        cmr_train=StageTrainConfig(base_lr=1e-3, batch_size=16, warmup_epochs=1, max_epochs=3),
        align=AlignConfig(tau=0.1, base_lr=1e-4, batch_size=64, warmup_epochs=1, max_epochs=12),
        heads=HeadTrainConfig(),
        tasks=(
            TaskSpec("lv_ef", "regression", "lv_ef"),
            TaskSpec("gcs", "regression", "gcs"),
            TaskSpec("gls", "regression", "gls"),
            TaskSpec("grs", "regression", "grs"),
        ),
        eval_sources=("none", "ed_only", "dual_phase"),
    )


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="/tmp/acc_probe")
    ap.add_argument("--seed", type=int, default=20)
    ap.add_argument("--fresh", action="store_true")
    ap.add_argument("--stages", default="synth,mae,cmr,align,eval")
    args = ap.parse_args()

    if args.fresh:
        shutil.rmtree(args.out, ignore_errors=True)
    cfg = acceptance_config(args.out, args.seed)
    stages = set(args.stages.split(","))
    times = {}

    def stage(name, fn):
        t0 = time.perf_counter()
        fn()
        times[name] = time.perf_counter() - t0
        print(f"[{name}] {times[name]:.0f}s", flush=True)

    if "synth" in stages:
        stage("synth", lambda: P.run_synth(cfg))
    if "mae" in stages:
        stage("mae", lambda: P.run_pretrain_ecg(cfg))
    if "cmr" in stages:
        stage("cmr_ed", lambda: P.run_train_cmr(cfg, "ed"))
        stage("cmr_es", lambda: P.run_train_cmr(cfg, "es"))
    if "align" in stages:
        stage("align_dual", lambda: P.run_align(cfg, "dual_phase"))
        stage("align_ed", lambda: P.run_align(cfg, "ed_only"))
    if "eval" in stages:
        stage("eval", lambda: P.run_eval(cfg))

    out = Path(args.out)
    print("\n=== align metrics (dual) ===")
    print((out / "align_dual_phase" / "metrics.csv").read_text())
    print("=== cmr logs ===")
    for ph in ("ed", "es"):
        print(ph, (out / f"cmr_{ph}" / "log.csv").read_text().splitlines()[-3:])
    print("=== results ===")
    print((out / "results.csv").read_text())
    print((out / "summary.txt").read_text())
    print("times:", json.dumps({k: round(v) for k, v in times.items()}))


if __name__ == "__main__":
    main()
