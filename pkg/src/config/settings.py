import math
import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

SRC_DIR = Path(__file__).resolve().parent.parent

# 测试系统算例目录
CASES_DIR = Path(os.getenv("SSA_CASES_DIR", SRC_DIR / "cases"))

# 系统注册表
SYSTEMS_FILE = Path(__file__).resolve().parent / "config.json"

# 潮流计算配置
POWER_FLOW_CONFIG = {
    "tol": 1e-8,
    "max_iter": 20,
}

# 小干扰稳定配置
SMALL_SIGNAL_CONFIG = {
    "omega_s": float(os.getenv("SSA_OMEGA_S", 2 * math.pi * 60)),
    "omega_floor": 1e-6,
    "sigma_floor": 1e-6,
    "threshold": 0.03,
    "resolve_post_outage": False,
}

# 图特征配置
FEATURE_CONFIG = {
    "k_len": 3,
    "n_features": 3,
    "eig_tol": 1e-10,
    "eig_max_iter": 10000,
    "pmu_budget": 0.3,
}

# 训练配置
TRAIN_CONFIG = {
    "lr": 1e-4,
    "batch_size": 128,
    "epochs": 2500,
    "adam_beta1": 0.9,
    "adam_beta2": 0.999,
    "adam_eps": 1e-8,
    "split": (0.75, 0.15, 0.10),
    "decision_threshold": 0.5,
    "conv_filters": 2,
    "conv_kernel": 2,
    "fc_sizes": (4, 5, 1),
    "log_every": 100,
}

# 数据集生成配置
DATASET_CONFIG = {
    "scale_range": (0.7, 1.5),
    "draw_cap_factor": 10,
    "contingencies": "lines",
    "imbalance_warning": 0.9,
}

# 日志配置
LOG_CONFIG = {
    "level": os.getenv("SSA_LOG_LEVEL", "INFO"),
    "format": "%(asctime)s - %(levelname)s - %(message)s",
    "file": "run.log",
}
