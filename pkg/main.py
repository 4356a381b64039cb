# main.py
"""
命令行入口：synth | train | predict | eval | ablate | plot

退出码: 0 成功, 2 参数错误, 3 数据错误, 4 数值错误（NaN/Inf）。
"""
import argparse
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from app.core.config import settings
from app.core.exceptions import DataError, DiffSegError, NumericError, ShapeError, UsageError
from app.core.model_config import INVALID_SUBSET_FRACTION, LOW_LIGHT_GAMMA, SYNTHETIC_DATASET, TRAIN_SPLIT
from app.models.run_config import ModelConfig, SamplerConfig, TrainConfig
from app.models.sample import DatasetManifest, SceneSpec
from app.services import tensor
from app.services.dataset_io import load_dataset, resolve_split
from app.tasks.task_utils import build_config, check_known_keys, load_config_file, parse_size

logger = logging.getLogger("DiffSegCLI")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _file_values(args, models) -> dict:
    if not getattr(args, "config", None):
        return {}
    values = load_config_file(args.config)
    check_known_keys(values, models)
    return values


def _model_flags(args) -> dict:
    return {
        "schedule": getattr(args, "schedule", None),
        "scale": getattr(args, "scale", None),
        "encoder_kind": getattr(args, "encoder", None),
    }


def _train_flags(args) -> dict:
    return {
        "lr": args.lr,
        "epochs": args.epochs,
        "batch_size": getattr(args, "batch_size", None),
        "warmup": getattr(args, "warmup", None),
        "seed": args.seed,
        "ckpt_every": getattr(args, "ckpt_every", None),
        "num_workers": getattr(args, "workers", None),
        "augment": False if getattr(args, "no_augment", False) else None,
    }


def _dataset_model_config(args, file_values: dict, manifest: DatasetManifest) -> ModelConfig:
    """类别数与图像尺寸以训练集清单为准。"""
    flags = _model_flags(args)
    flags.update({"image_size": manifest.height, "num_classes": len(manifest.classes)})
    return build_config(ModelConfig, file_values, flags)


def cmd_synth(args):
    from app.tasks.synth_tasks import run_synth_task
    h, w = parse_size(args.size)
    if args.count < 0 or args.test_count < 0:
        raise UsageError(f"样本数不能为负: --count {args.count}, --test-count {args.test_count}")
    try:
        spec = SceneSpec(num_classes=args.classes, height=h, width=w, invalid_rate=args.invalid_rate)
    except ValueError as e:
        raise UsageError(f"场景参数非法: {e}") from e
    run_synth_task(args.out, spec, args.count, args.test_count, args.seed)


def cmd_train(args):
    from app.tasks.train_tasks import fit
    file_values = _file_values(args, (ModelConfig, TrainConfig))
    train_cfg = build_config(TrainConfig, file_values, _train_flags(args))
    samples, manifest = load_dataset(resolve_split(args.data, TRAIN_SPLIT))
    model_cfg = _dataset_model_config(args, file_values, manifest)
    log_path = args.log or str(Path(args.out).with_suffix(".loss.csv"))
    fit(samples, model_cfg, train_cfg, args.out, log_path)


def cmd_predict(args):
    from app.tasks.predict_tasks import run_predict_task
    file_values = _file_values(args, (SamplerConfig,))
    cfg = build_config(SamplerConfig, file_values, {"steps": args.steps, "td": args.td, "seed": args.seed})
    run_predict_task(args.ckpt, args.data, args.out, cfg, viz_dir=args.viz, lowlight=args.lowlight,
                     gamma=args.gamma)


def cmd_eval(args):
    from app.tasks.eval_tasks import run_eval_task
    run_eval_task(args.pred, args.gt, subset=args.subset, ignore_classes=args.ignore_classes,
                  dataset_name=args.dataset_name, fraction=args.fraction, report_path=args.report,
                  gamma=args.gamma)


def cmd_ablate(args):
    from app.tasks.ablation_tasks import run_ablation_task
    file_values = _file_values(args, (ModelConfig, TrainConfig, SamplerConfig))
    train_cfg = build_config(TrainConfig, file_values, _train_flags(args))
    sampler_cfg = build_config(SamplerConfig, file_values, {"steps": args.steps, "td": args.td, "seed": args.seed})
    _, manifest = load_dataset(resolve_split(args.data, TRAIN_SPLIT))
    model_cfg = _dataset_model_config(args, file_values, manifest)
    run_ablation_task(args.data, args.out, args.axis, args.values, model_cfg, train_cfg, sampler_cfg)


def cmd_plot(args):
    from tools.loss_plotter import plot_loss_curves
    for path in args.logs:
        if not Path(path).is_file():
            raise DataError(f"loss 日志不存在: {path}")
    plot_loss_curves(args.logs, Path(args.out))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="RGB-D 扩散语义分割（桌面规模）。")
    parser.add_argument("--debug-numerics", action="store_true", help="每个算子后检查 NaN/Inf")
    parser.add_argument("-v", "--verbose", action="store_true", help="输出 DEBUG 日志")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="生成合成 RGB-D 数据集")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=settings.TRAIN_COUNT, help="训练集样本数")
    p.add_argument("--test-count", type=int, default=settings.TEST_COUNT)
    p.add_argument("--size", default=f"{settings.IMAGE_SIZE}x{settings.IMAGE_SIZE}", help="HxW")
    p.add_argument("--classes", type=int, default=settings.NUM_CLASSES)
    p.add_argument("--invalid-rate", type=float, default=settings.INVALID_RATE)
    p.add_argument("--seed", type=int, default=settings.SEED)
    p.set_defaults(func=cmd_synth)

    def add_train_flags(p):
        p.add_argument("--epochs", type=int)
        p.add_argument("--schedule", choices=["cosine", "linear"])
        p.add_argument("--scale", type=float)
        p.add_argument("--lr", type=float, help="峰值学习率，默认 6e-5；桌面规模的合成数据（200 张 64x64、40 个 epoch）用 --lr 1e-3")
        p.add_argument("--batch-size", type=int)
        p.add_argument("--warmup", type=float)
        p.add_argument("--encoder", choices=["dat", "conv"])
        p.add_argument("--workers", type=int)
        p.add_argument("--no-augment", action="store_true")
        p.add_argument("--seed", type=int)
        p.add_argument("--config", help="key=value 配置文件")

    p = sub.add_parser("train", help="训练")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="检查点路径")
    p.add_argument("--log", help="loss CSV 路径（默认与检查点同名）")
    p.add_argument("--ckpt-every", type=int)
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="DDIM 采样得到预测标签")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--td", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--viz", help="着色掩码与采样点叠加图输出目录")
    p.add_argument("--lowlight", action="store_true", help="采样前对 RGB 做 gamma 变暗")
    p.add_argument("--gamma", type=float, default=LOW_LIGHT_GAMMA)
    p.add_argument("--config")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="计算 mIoU")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--subset", choices=["invalid", "lowlight", "small"])
    p.add_argument("--gamma", type=float, default=LOW_LIGHT_GAMMA, help="仅作记录，变暗在 predict --lowlight 中完成")
    p.add_argument("--ignore-classes", nargs="+")
    p.add_argument("--dataset-name", default=SYNTHETIC_DATASET, help="nyuv2 | sunrgbd | synthetic（小物体子集的忽略列表）")
    p.add_argument("--fraction", type=float, default=INVALID_SUBSET_FRACTION)
    p.add_argument("--report", help="CSV 报告路径")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="噪声调度 / s 消融")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--axis", required=True, choices=["schedule", "scale"])
    p.add_argument("--values", nargs="+")
    p.add_argument("--steps", type=int)
    p.add_argument("--td", type=float)
    add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="绘制 loss 曲线")
    p.add_argument("--logs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    if args.debug_numerics:
        tensor.set_debug(True)

    try:
        args.func(args)
    except (UsageError, ValidationError) as e:
        logger.error(f"参数错误: {e}")
        return EXIT_USAGE
    except NumericError as e:
        logger.error(f"数值错误: {e}", exc_info=True)
        return EXIT_NUMERIC
    except (DataError, ShapeError) as e:
        logger.error(f"数据错误: {e}", exc_info=True)
        return EXIT_DATA
    except DiffSegError as e:
        logger.error(f"运行失败: {e}", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
