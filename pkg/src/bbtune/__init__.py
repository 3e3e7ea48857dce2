"""Layerwise subspace CMA-ES prompt tuning against a toy residual transformer
served behind an inference API."""
from .cma_es import CmaState, cma_ask, cma_init, cma_tell, default_popsize
from .model import (COMPACT, DeepPrompt, ModelConfig, ToyModel, build_model, capture_initial_deep_prompt,
                    decomposition_check, forward, layer_hidden_stats, load_model, save_model)
from .optimizer import (RunConfig, RunHistory, RunResult, cross_entropy_loss, evaluate_metric, run_bbt, run_bbtv2,
                        task_stats)
from .projection import LayerStats, ProjectionMatrix, compute_sigma_a, observe_stats, project, sample_projection
from .service import EvalApi, InProcessEvalApi, RemoteEvalApi, TrafficLedger, serve
from .tasks import FewShotTask, make_few_shot_task

__version__ = "0.1.0"
