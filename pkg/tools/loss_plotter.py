# tools/loss_plotter.py
import argparse
import logging
from pathlib import Path
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd

try:
    from app.services.metrics import loss_spikes
except ImportError:
    import sys
    sys.path.append(str(Path(__file__).parent.parent))
    from app.services.metrics import loss_spikes

logger = logging.getLogger("LossPlotter")


def plot_loss_curves(log_paths: List[str], output_path: Path, window: int = 20, factor: float = 2.0):
    """每个 loss CSV 画一条曲线，并用圆点标出检测到的尖峰。"""
    logger.info(f"--- [绘图] loss 曲线: {len(log_paths)} 条 -> {output_path} ---")
    fig, ax = plt.subplots(figsize=(10, 5))
    for path in log_paths:
        df = pd.read_csv(path)
        label = Path(path).stem
        ax.plot(df["step"], df["loss"], linewidth=1.0, label=label)
        spikes = loss_spikes(df["loss"].tolist(), window, factor)
        if spikes:
            ax.scatter(df["step"].iloc[spikes], df["loss"].iloc[spikes], s=18, zorder=3)
        logger.info(f"{label}: {len(df)} 步, 尖峰 {len(spikes)} 次")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(output_path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"图像已保存: {output_path}")


def main():
    logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
    parser = argparse.ArgumentParser(description="绘制训练 loss 曲线并标出尖峰。")
    parser.add_argument("--logs", nargs="+", required=True, help="loss CSV 文件")
    parser.add_argument("--out", required=True, help="输出 PNG 路径")
    args = parser.parse_args()
    plot_loss_curves(args.logs, Path(args.out))


if __name__ == "__main__":
    main()
