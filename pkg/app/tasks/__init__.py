# app/tasks/__init__.py

# 让命令行入口可以方便地导入核心任务
from .synth_tasks import run_synth_task
from .predict_tasks import run_predict_task
from .eval_tasks import run_eval_task
from .ablation_tasks import run_ablation_task
