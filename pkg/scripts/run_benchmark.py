#!/usr/bin/env python3
"""
Desk-scale benchmark runner
합성 차량 장면으로 학습 → 검증 AP, 레이어 수 비교, 동일 seed 재현성 확인
"""

import argparse
import filecmp
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd

# 프로젝트 루트 디렉토리 설정
PROJECT_ROOT = Path(__file__).parent.parent.absolute()
SRC_DIR = PROJECT_ROOT / "src"
if str(SRC_DIR) not in sys.path:
    sys.path.insert(0, str(SRC_DIR))

from box_geometry import write_detections  # noqa: E402
from detector import Detector  # noqa: E402
from detector_errors import EXIT_NUMERIC, EXIT_OK, DetectorError, exit_code_for  # noqa: E402
from evaluator import evaluate_dataset  # noqa: E402
from pipeline_config import PipelineConfig, load_config  # noqa: E402
from scene_generator import generate_dataset  # noqa: E402
from trainer import train_loop  # noqa: E402

logger = logging.getLogger("gatdet-benchmark")

DEFAULT_CONFIG = PROJECT_ROOT / "configs" / "desk_car.json"
AP_GATE = 0.90
LOSS_RATIO_GATE = 0.20
LOSS_WINDOW = 100


@dataclass
class RunSummary:
    num_layers: int
    ap_3d: Optional[float]
    ap_bev: Optional[float]
    loss_ratio: Optional[float]
    train_seconds: float
    checkpoint: Path
    detections: Path


def loss_ratio(history: pd.DataFrame, window: int = LOSS_WINDOW) -> Optional[float]:
    """마지막 window 평균 손실 / 처음 window 평균 손실"""
    if len(history) < 2 * window:
        return None
    first = history["total"].iloc[:window].mean()
    last = history["total"].iloc[-window:].mean()
    return float(last / first) if first > 0 else None


def run_once(config: PipelineConfig, workdir: Path, tag: str) -> RunSummary:
    """학습 1회 + 체크포인트로 검증 장면 추론/평가"""
    train = config.train
    scenes = generate_dataset(train.seed, train.train_scenes, config.scenes, "train")
    validation = generate_dataset(train.seed + 1, train.validation_scenes, config.scenes, "val")
    cache = config.make_cache()
    detector_config = config.detector_config()

    started = time.perf_counter()
    result = train_loop(train, detector_config, scenes, (), config.loss, config.eval,
                        checkpoint_path=workdir / f"{tag}.gdck", metrics_path=workdir / f"{tag}.metrics.tsv",
                        cache=cache)
    seconds = time.perf_counter() - started

    detector = Detector.from_checkpoint(result.checkpoint_path, detector_config, cache)
    predictions = detector.detect_scenes(validation)
    detection_dir = workdir / f"{tag}_detections"
    for scene_id, detections in predictions.items():
        write_detections(detection_dir / f"{scene_id}.txt", detections)
    report = evaluate_dataset(predictions, {scene.scene_id: scene.objects for scene in validation}, config.eval,
                              classes=[train.object_class])
    return RunSummary(config.gnn.num_layers, report.ap(train.object_class, "3d"),
                      report.ap(train.object_class, "bev"), loss_ratio(result.history), seconds,
                      result.checkpoint_path, detection_dir)


def same_outputs(a: RunSummary, b: RunSummary) -> bool:
    """체크포인트 바이트와 검출 파일이 모두 같은지"""
    if a.checkpoint.read_bytes() != b.checkpoint.read_bytes():
        return False
    names = sorted(p.name for p in a.detections.glob("*.txt"))
    if names != sorted(p.name for p in b.detections.glob("*.txt")):
        return False
    _, mismatch, errors = filecmp.cmpfiles(a.detections, b.detections, names, shallow=False)
    return not mismatch and not errors


def run_benchmark(config_path: Optional[str], workdir: Path, layers: Sequence[int] = (1, 2, 3),
                  overrides: Sequence[str] = (), check_determinism: bool = True) -> Dict[str, object]:
    """레이어 수별 학습/평가와 재현성 확인; 결과 표와 gate 판정 반환"""
    workdir.mkdir(parents=True, exist_ok=True)
    base = load_config(config_path, overrides)
    logger.info(f"benchmark configuration: {base.to_json()}")

    runs: List[RunSummary] = []
    for num_layers in layers:
        config = load_config(config_path, list(overrides) + [f"gnn.num_layers={num_layers}"])
        summary = run_once(config, workdir, f"layers{num_layers}")
        logger.info(f"{num_layers} layers: AP3d={summary.ap_3d} APbev={summary.ap_bev} "
                    f"loss ratio={summary.loss_ratio} ({summary.train_seconds:.0f}s)")
        runs.append(summary)

    deterministic = None
    if check_determinism:
        repeat = run_once(base, workdir, "repeat_a")
        again = run_once(base, workdir, "repeat_b")
        deterministic = same_outputs(repeat, again)
        logger.info(f"identical-seed runs byte-identical: {deterministic}")

    table = pd.DataFrame([{"num_layers": r.num_layers, "ap_3d": r.ap_3d, "ap_bev": r.ap_bev,
                           "loss_ratio": r.loss_ratio, "train_seconds": round(r.train_seconds, 1)} for r in runs])
    reference = next((r for r in runs if r.num_layers == base.gnn.num_layers), None)
    gates = {
        "ap_3d": reference is not None and reference.ap_3d is not None and reference.ap_3d >= AP_GATE,
        "loss_ratio": reference is not None and reference.loss_ratio is not None
                      and reference.loss_ratio < LOSS_RATIO_GATE,
    }
    if deterministic is not None:
        gates["determinism"] = deterministic
    return {"table": table, "gates": gates, "deterministic": deterministic}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="gatdet desk-scale benchmark")
    parser.add_argument("--config", default=str(DEFAULT_CONFIG))
    parser.add_argument("--workdir", default=str(PROJECT_ROOT / "benchmark_runs"))
    parser.add_argument("--layers", default="1,2,3", help="쉼표로 구분한 레이어 수 목록")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    parser.add_argument("--skip-determinism", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(level=os.getenv("GATDET_LOG_LEVEL", "INFO").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        outcome = run_benchmark(args.config, Path(args.workdir), [int(n) for n in args.layers.split(",")],
                                args.overrides, not args.skip_determinism)
    except DetectorError as e:
        logger.error(f"benchmark failed: {e}")
        return exit_code_for(e)

    print(outcome["table"].to_string(index=False))
    print(json.dumps(outcome["gates"], sort_keys=True))
    return EXIT_OK if all(outcome["gates"].values()) else EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
