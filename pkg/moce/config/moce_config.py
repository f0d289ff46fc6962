import os
from typing import Dict, Any

from dotenv import load_dotenv

load_dotenv()

# Model Parameters
MODEL_PARAMETERS: Dict[str, Dict[str, Any]] = {
    "embedding": {
        "dimension": int(os.getenv("MOCE_EMBEDDING_DIM", "64")),
        "fields": os.getenv("MOCE_EMBED_FIELDS", "instruction"),  # or "instruction_response"
        "norm_tolerance": 1e-9,
        "file_precision": 9,  # significant digits written per value
    },
    "clustering": {
        "max_iters": 100,
        "tol": 0.0,
        "n_init": 3,  # best-of-n seeded restarts per fit
        "k_max": 10,
        "n_jobs": int(os.getenv("MOCE_N_JOBS", "1")),
        "monotonic_tolerance": 1e-9,
    },
    "moce": {
        "adapter_rank": 64,
        "num_experts": 4,  # per cluster
        "top_k": 2,
        "mode": "topk",
        "renormalize": False,
        "moe_scaling": 1.0,
        "balance_coefficient": 0.01,
        "init_std": 0.02,
        "activation": os.getenv("MOCE_ACTIVATION", "gelu"),
    },
    "model": {
        "d_model": 32,
        "n_layers": 2,
        "n_heads": 2,
        "ffn_multiplier": 4,
        "max_seq_len": 512,
        "init_std": 0.02,
        "layer_norm_eps": 1e-5,
        "train_attention": False,
        "train_base": False,  # unfreeze every upcycled dense parameter
    },
    "training": {
        "learning_rate": 2e-4,
        "batch_size": 32,
        "epochs": 1,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "dense_pretrain_steps": 0,
    },
    "evaluation": {
        "max_new_tokens": 32,
        "n_jobs": int(os.getenv("MOCE_EVAL_N_JOBS", "1")),
    },
}

# Monitoring and Logging
MONITORING = {
    "log_level": os.getenv("MOCE_LOG_LEVEL", "INFO"),
    "log_every": int(os.getenv("MOCE_LOG_EVERY", "10")),  # steps
    "metrics_file": "metrics.jsonl",
    "summary_file": "summary.csv",
}

# Error Handling
ERROR_HANDLING = {
    "exit_codes": {
        "success": 0,
        "internal_error": 1,
        "config_error": 2,
        "data_format_error": 3,
        "numeric_error": 4,
    },
}
