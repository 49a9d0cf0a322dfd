"""
config.py — All defaults for the Domain Shift Eraser simulator.
"""

# ── Numerics ────────────────────────────────────────────────────────────────
DEFAULT_DTYPE   = "float32"
BN_EPS          = 1e-5
BN_MOMENTUM     = 0.9        # weight of the OLD running value
DEBUG_FINITE    = False      # raise on NaN/Inf after every op

# ── Architecture (desk scale) ───────────────────────────────────────────────
BLOCK_CHANNELS  = [32, 64]
KERNEL_SIZE     = 3
EXPANSION       = 2          # G
CHEAP_KERNEL    = 3          # dw
POOL_SIZE       = 2          # MaxPool2D(k, k) after each block, 0 = none
AVGPOOL_SIZE    = 2          # AdaptiveAvgPool2D(p, p) before the head, 0 = none

# ── Local training ──────────────────────────────────────────────────────────
ROUNDS          = 150
LOCAL_EPOCHS    = 1
BATCH_SIZE      = 50
LEARNING_RATE   = 0.05
LR_DECAY        = 0.998      # per round
CLIP_NORM       = 10.0

# ── Consistency regularizer ─────────────────────────────────────────────────
LAMBDA          = 0.1
BETA            = 0.001

# ── Aggregation ─────────────────────────────────────────────────────────────
TAU                  = 0.1
FW_MAX_ITER          = 500
FW_GAP_TOL           = 1e-7
FW_CONFLICT_SLACK    = 1e-6      # gap must also be below slack * ||combination||
ZERO_UPDATE_NORM     = 1e-12     # client updates below this are excluded
ZERO_COMBINATION_SQ  = 1e-12     # min-norm objective below this snaps to zero
UNIT_NORM_TOL        = 1e-4
CONFLICT_TOL         = 1e-6      # normalized dot below -tol means the combination opposes a client
EXACT_SOLVER_MAX_CLIENTS = 6     # unconverged runs are re-solved exactly up to this many clients
FW_RETRY_ITER        = 5000      # extra Frank–Wolfe budget above that size
CONSENSUS_GRANULARITY = "layer"  # "layer" | "model"

# ── Adaptation ──────────────────────────────────────────────────────────────
ADAPT_EPOCHS     = 5
ADAPT_LR_SCALE   = 0.1       # adaptation lr = scale * training lr

# ── Synthetic benchmark (SynthDomains-4) ────────────────────────────────────
NUM_DOMAINS        = 4
NUM_CLASSES        = 8
SAMPLES_PER_CLASS  = 200
IMAGE_SIZE         = 16
IMAGE_CHANNELS     = 1
CLASS_NOISE        = 0.35
PROTOTYPE_SEPARATION = 4.0   # min pairwise prototype distance / class std
LOW_FREQ_MAX       = 2       # cosine basis frequencies 0..LOW_FREQ_MAX
SPLIT_RATIOS       = (0.8, 0.1, 0.1)
SPLIT_NAMES        = ("train", "val", "test")
DATA_SEED          = 0

DOMAIN_DEFS = [
    {"id": 0, "angle": 0.0,   "gain": [1.0], "offset": [0.0],  "noise": 0.10, "nonlinearity": None},
    {"id": 1, "angle": 0.6,   "gain": [1.6], "offset": [0.8],  "noise": 0.15, "nonlinearity": None},
    {"id": 2, "angle": -0.9,  "gain": [0.6], "offset": [-0.7], "noise": 0.20, "nonlinearity": None},
    {"id": 3, "angle": 1.571, "gain": [1.2], "offset": [0.3],  "noise": 0.10, "nonlinearity": "tanh"},
]

# ── Methods ─────────────────────────────────────────────────────────────────
# Sharing rules per state class; see methods.py for their meaning.
METHOD_DEFS = [
    {"name": "fdse",   "shared": "consensus", "personalized": "attention",
     "bn_affine": None,    "bn_stats": None,      "regularized": True,  "adaptation": "fdse"},
    {"name": "fedavg", "shared": "average",   "personalized": "average",
     "bn_affine": "average", "bn_stats": "average", "regularized": False, "adaptation": "none"},
    {"name": "fedbn",  "shared": "average",   "personalized": "average",
     "bn_affine": "local",   "bn_stats": "local",   "regularized": False, "adaptation": "fedbn"},
    {"name": "local",  "shared": "local",     "personalized": "local",
     "bn_affine": "local",   "bn_stats": "local",   "regularized": False, "adaptation": None},
]
DEFAULT_METHOD = "fdse"

# ── Runs ────────────────────────────────────────────────────────────────────
SEED                = 0
PARALLEL_CLIENTS    = 1
CHECKPOINT_EVERY    = 50
OUTPUT_ROOT_ENV     = "FDSE_OUTPUT_ROOT"
OUTPUT_DIR          = "runs/latest"
DATASET_DIR         = "data/synth_domains_4"
METRICS_SCHEMA      = 1
BUNDLE_FORMAT       = 1

CONFIG_FILE         = "config.yaml"
METRICS_FILE        = "metrics.jsonl"
AGGREGATION_FILE    = "aggregation.jsonl"
SUMMARY_FILE        = "summary.json"
CHECKPOINT_DIR      = "checkpoints"
BEST_DIR            = "best"
DATASET_MANIFEST    = "dataset.json"
DOMAIN_MANIFEST     = "manifest.json"
REPORT_FILE         = "report.json"
SERIES_FILE         = "per_domain_series.csv"

# ── Exit codes ──────────────────────────────────────────────────────────────
EXIT_OK             = 0
EXIT_CONFIG_ERROR   = 2
EXIT_DATA_ERROR     = 3
EXIT_RUNTIME_ERROR  = 4
EXIT_INTERRUPTED    = 130

# ── Logging ─────────────────────────────────────────────────────────────────
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
