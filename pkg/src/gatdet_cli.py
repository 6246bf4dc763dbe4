#!/usr/bin/env python3
"""
gatdet Command Line Interface
downsample / graph / generate / train / infer / eval / selfcheck 서브커맨드
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from box_geometry import read_detections, write_detections
from detector import Detector, summarize_timings
from detector_errors import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, ConfigError, DataFormatError, exit_code_for
from downsampler import BandSpec, downsample_distance_aware, downsample_uniform
from evaluator import EvalConfig, evaluate_dataset, write_report
from graph_builder import build_graph, write_edge_list
from pipeline_config import PipelineConfig, load_config
from pointcloud_io import (
    LabeledScene, PointCloud, load_calib, load_labels, load_scene, load_scene_dir, load_velodyne, save_scene,
    save_velodyne,
)
from scene_generator import generate_dataset
from self_check import run_self_check
from trainer import train_loop

logger = logging.getLogger("gatdet-cli")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON 설정 파일 (없으면 기본값)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="설정 값 override (여러 번 가능)")
    common.add_argument("--log-level", default=None, help="DEBUG/INFO/WARNING (기본: GATDET_LOG_LEVEL 또는 INFO)")

    parser = argparse.ArgumentParser(prog="gatdet", description="attention GNN 3D LiDAR 객체 검출기")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("downsample", parents=[common], help="포인트 클라우드 voxel 다운샘플링")
    p.add_argument("--input", required=True, help=".bin (KITTI velodyne) 또는 장면 .json")
    p.add_argument("--output", required=True, help="출력 .bin")
    p.add_argument("--bands", help="거리 대역 (예: 20:0.8,40:0.65,inf:0.5)")
    p.add_argument("--uniform", type=float, metavar="EDGE", help="균일 voxel 크기 (지정 시 대역 무시)")

    p = sub.add_parser("graph", parents=[common], help="반경 이웃 그래프 edge list 작성")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--radius", type=float)
    p.add_argument("--max-neighbors", type=int)

    p = sub.add_parser("generate", parents=[common], help="합성 장면 생성")
    p.add_argument("--output", required=True, help="출력 디렉토리")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prefix", default="scene")
    p.add_argument("--velodyne", action="store_true", help="velodyne/<id>.bin 도 함께 작성")

    p = sub.add_parser("train", parents=[common], help="검출기 학습")
    p.add_argument("--train-dir", help="학습 장면 .json 디렉토리 (없으면 합성 장면)")
    p.add_argument("--val-dir", help="검증 장면 .json 디렉토리 (없으면 합성 장면)")
    p.add_argument("--output", required=True, help="체크포인트 경로")
    p.add_argument("--metrics", help="step 별 손실 TSV 경로 (기본: <output>.metrics.tsv)")

    p = sub.add_parser("infer", parents=[common], help="체크포인트로 검출")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="장면 파일 또는 디렉토리 (.json / .bin)")
    p.add_argument("--output", required=True, help="검출 결과 디렉토리 (<scene id>.txt)")
    p.add_argument("--calib", help=".bin 입력용 KITTI calib 파일 (frustum crop)")

    p = sub.add_parser("eval", parents=[common], help="검출 결과 AP 평가")
    p.add_argument("--pred", required=True, help="검출 결과 디렉토리 (<scene id>.txt)")
    p.add_argument("--gt", required=True, help="정답 장면 .json 또는 KITTI label .txt 디렉토리")
    p.add_argument("--calib-dir", help="KITTI label 사용 시 calib 디렉토리")
    p.add_argument("--output", required=True, help="리포트 TSV 경로")
    p.add_argument("--interpolation", type=int, choices=(11, 40))

    p = sub.add_parser("selfcheck", parents=[common], help="oracle 검증 묶음 실행")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tamper-gradient", action="store_true", help=argparse.SUPPRESS)
    return parser


def setup_logging(level: Optional[str]):
    level = (level or os.getenv("GATDET_LOG_LEVEL") or "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def read_cloud(path: Path) -> PointCloud:
    if path.suffix == ".bin":
        return load_velodyne(path)
    if path.suffix == ".json":
        return load_scene(path).cloud
    raise DataFormatError(f"unsupported point cloud file: {path.name}")


def _scene_files(path: Path) -> List[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise DataFormatError(f"input not found: {path}")
    return sorted(p for p in path.iterdir() if p.suffix in (".json", ".bin"))


def cmd_downsample(args, config: PipelineConfig) -> int:
    cloud = read_cloud(Path(args.input))
    if args.uniform is not None:
        reduced = downsample_uniform(cloud, args.uniform)
    else:
        reduced = downsample_distance_aware(cloud, BandSpec.parse(args.bands or config.downsample.bands))
    save_velodyne(args.output, reduced)
    logger.info(f"{len(cloud)} -> {len(reduced)} points written to {args.output}")
    return EXIT_OK


def cmd_graph(args, config: PipelineConfig) -> int:
    cloud = read_cloud(Path(args.input))
    radius = args.radius if args.radius is not None else config.graph.radius
    max_neighbors = args.max_neighbors if args.max_neighbors is not None else config.graph.max_neighbors
    graph = build_graph(cloud, radius, max_neighbors)
    write_edge_list(args.output, graph)
    logger.info(f"{graph.num_vertices} vertices, {graph.num_edges} edges written to {args.output}")
    return EXIT_OK


def cmd_generate(args, config: PipelineConfig) -> int:
    output = Path(args.output)
    scenes = generate_dataset(args.seed, args.count, config.scenes, args.prefix)
    for scene in scenes:
        save_scene(output / f"{scene.scene_id}.json", scene)
        if args.velodyne:
            save_velodyne(output / "velodyne" / f"{scene.scene_id}.bin", scene.cloud)
    logger.info(f"{len(scenes)} scenes written to {output}")
    return EXIT_OK


def _dataset(directory: Optional[str], config: PipelineConfig, count: int, seed: int, prefix: str) -> List[LabeledScene]:
    if directory:
        return load_scene_dir(directory)
    return generate_dataset(seed, count, config.scenes, prefix)


def cmd_train(args, config: PipelineConfig) -> int:
    train = config.train
    scenes = _dataset(args.train_dir, config, train.train_scenes, train.seed, "train")
    validation = _dataset(args.val_dir, config, train.validation_scenes, train.seed + 1, "val")
    metrics = args.metrics or f"{args.output}.metrics.tsv"
    result = train_loop(train, config.detector_config(), scenes, validation, config.loss, config.eval,
                        checkpoint_path=args.output, metrics_path=metrics, cache=config.make_cache())
    if not result.validation.empty:
        logger.info(f"validation history:\n{result.validation.to_string(index=False)}")
    return EXIT_OK


def cmd_infer(args, config: PipelineConfig) -> int:
    detector = Detector.from_checkpoint(args.checkpoint, config.detector_config(), config.make_cache())
    calib = load_calib(args.calib) if args.calib else None
    output = Path(args.output)
    output.mkdir(parents=True, exist_ok=True)
    results = []
    for path in _scene_files(Path(args.input)):
        cloud = read_cloud(path)
        scene_id = path.stem
        result = detector.detect(cloud, calib if path.suffix == ".bin" else None)
        write_detections(output / f"{scene_id}.txt", result.detections)
        results.append(result)
        logger.info(f"{scene_id}: {len(result.detections)} detections "
                    f"({result.num_points} points, {result.num_vertices} vertices)")
    timings = summarize_timings(results)
    if timings:
        logger.info("mean stage timings (ms): " + ", ".join(f"{k}={v * 1000:.2f}" for k, v in timings.items()))
    return EXIT_OK


def _ground_truth(directory: Path, calib_dir: Optional[str]) -> Dict[str, list]:
    if not directory.is_dir():
        raise DataFormatError(f"ground-truth directory not found: {directory}")
    truth = {path.stem: load_scene(path).objects for path in sorted(directory.glob("*.json"))}
    if calib_dir:
        for path in sorted(directory.glob("*.txt")):
            truth[path.stem] = load_labels(path, load_calib(Path(calib_dir) / path.name))
    return truth


def cmd_eval(args, config: PipelineConfig) -> int:
    eval_config: EvalConfig = config.eval
    if args.interpolation:
        eval_config = EvalConfig(eval_config.iou_thresholds, args.interpolation, eval_config.iou_kinds)
    pred_dir = Path(args.pred)
    if not pred_dir.is_dir():
        raise DataFormatError(f"prediction directory not found: {pred_dir}")
    predictions = {path.stem: read_detections(path) for path in sorted(pred_dir.glob("*.txt"))}
    truth = _ground_truth(Path(args.gt), args.calib_dir)
    report = evaluate_dataset(predictions, truth, eval_config)
    write_report(report, args.output)
    logger.info(f"evaluation report written to {args.output}\n{report.summary.to_string(index=False)}")
    return EXIT_OK


def cmd_selfcheck(args, config: PipelineConfig) -> int:
    report = run_self_check(args.seed, tamper=args.tamper_gradient)
    print(report.format())
    return EXIT_OK if report.passed else EXIT_NUMERIC


COMMANDS = {
    "downsample": cmd_downsample,
    "graph": cmd_graph,
    "generate": cmd_generate,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "selfcheck": cmd_selfcheck,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    setup_logging(args.log_level)
    try:
        config = load_config(args.config, args.overrides)
        logger.info(f"resolved configuration: {json.dumps(config.to_dict(), sort_keys=True)}")
        return COMMANDS[args.command](args, config)
    except ConfigError as e:
        logger.error(f"configuration error: {e}")
        return exit_code_for(e)
    except Exception as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        logger.debug("traceback", exc_info=True)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
