"""Constants for the clinigym package."""

DOMAIN = "clinigym"

# Episode defaults
DEFAULT_MAX_TURNS = 5  # assistant turns per episode
DEFAULT_MAX_OBSERVATION_CHARS = 100_000  # rendered observation budget
DEFAULT_MAX_ACTION_CHARS = 10_000  # longest accepted action text
DEFAULT_MAX_RESPONSE_TOKENS = 12_288  # L_max, cumulative response tokens

# Tool names every toolkit carries
TOOL_SUBMIT_ANSWER = "submit_answer"
TOOL_THINK = "think"

# Domains
DOMAIN_CLINICAL_DIAGNOSIS = "clinical_diagnosis"
DOMAIN_MEDICAL_QA = "medical_qa"
DOMAIN_MICRO_CLINIC = "micro_clinic"
DOMAIN_CROSS = "cross_domain"
CLINICAL_DOMAINS = (
    "clinical_diagnosis",
    "medical_qa",
    "visual_diagnosis",
    "drug_interaction",
    "ehr_management",
    "triage_emergency",
    "radiology_report",
    "psychiatry",
    "obstetrics",
)

# Reward basis values
BASIS_ACTION = "ACTION"
BASIS_NL_ASSERTION = "NL_ASSERTION"

# 5D reward weights
DEFAULT_W_ACC = 0.25
DEFAULT_W_PROC = 0.20
DEFAULT_W_SAFE = 0.20
DEFAULT_W_FMT = 0.10
DEFAULT_W_COH = 0.10
DEFAULT_W_ASSERT = 0.15

# Safety penalties by severity, severity 5 caps instead
SEVERITY_PENALTIES = {4: 0.3, 3: 0.15, 2: 0.05, 1: 0.01}
CRITICAL_SEVERITY = 5
CRITICAL_REWARD_CAP = 0.1
MAX_SEVERITY = 5

# Process score mix
PROCESS_COVERAGE_WEIGHT = 0.6
PROCESS_DIVERSITY_WEIGHT = 0.2
PROCESS_THOROUGHNESS_WEIGHT = 0.2
PROCESS_RUBRIC_WEIGHT = 0.7

# Format grades
FORMAT_BARE = 1.0
FORMAT_FENCED = 0.8
FORMAT_PARTIAL = 0.5
FORMAT_INVALID = 0.0
MIN_CONCLUSION_CHARS = 10  # final answers of this length or shorter are not conclusions

# Coherence deductions
COHERENCE_CONTRADICTION_PENALTY = 0.4
COHERENCE_NO_CONCLUSION_PENALTY = 0.3
COHERENCE_REPETITION_PENALTY = 0.3
MAX_IDENTICAL_CALLS = 3

# Correctness thresholds for the cosine reward and hints
EXACT_CORRECT_THRESHOLD = 0.99
SOFT_CORRECT_THRESHOLD = 0.5

# Cosine length reward
DEFAULT_COSINE_R_MAX = 1.1
DEFAULT_COSINE_R_MIN = 0.7
DEFAULT_COSINE_R_PENALTY = -0.5

# Knowledge store
BM25_K1 = 1.2
BM25_B = 0.75
SNIPPET_WINDOW = 240  # characters
SNIPPET_LEAD = 60  # characters kept before the first match
DEFAULT_SEARCH_K = 5

# Toy policy
TOY_TURN_TOKEN_CAP = 24  # tokens sampled per turn at most
TOY_MAX_RESPONSE_TOKENS = 64  # L_max for toy training
TOY_LEARNING_RATE = 1e-2
TOY_MAX_GRAD_NORM = 5.0
END_TOKEN = "<end>"

# Trainer defaults
DEFAULT_GROUP_SIZE = 3  # G rollouts per prompt
DEFAULT_KL_BETA = 0.01
DEFAULT_LAMBDA_DISTILL = 4.0
DEFAULT_EMA_DECAY = 0.995
DEFAULT_EMA_INTERVAL = 5  # steps
DEFAULT_HARD_COPY_INTERVAL = 30  # steps
DEFAULT_CLIP_EPSILON = 0.2
DEFAULT_BATCH_PROMPTS = 8
DEFAULT_TRAIN_STEPS = 200
DEFAULT_TRAIN_TASKS = 64
DEFAULT_VALIDATION_TASKS = 16
VALIDATION_SEED_OFFSET = 1_000_003
ADVANTAGE_EPSILON = 1e-6
VARIANTS = ("grpo", "reset", "ema", "ema_hints", "full")
REWARD_MODES = ("cosine", "accuracy")
HINT_NONE = "none"
HINT_REINFORCING = "reinforcing"
HINT_CORRECTIVE = "corrective"
REINFORCING_HINTS = ("Reasoning appears sound.", "The evidence chain supports this answer.")
CORRECTIVE_HINTS = ("Revisit the differential diagnosis.", "Re-check the case findings before answering.")

# Dynamics lab
TRAILING_WINDOW_FRACTION = 0.1  # share of final steps averaged for "final" values
KL_DROP_FLOOR = 1e-8  # KL values below this are treated as zero in drop checks
SAWTOOTH_MAX_RATIO = 0.1
SMOOTH_MAX_DROP = 0.5
RESTORING_FORCE_MIN_SPEARMAN = 0.8
RESTORING_FORCE_VARIANT = "reset"  # hard copies reset the teacher distance to zero
GRADIENT_AUDIT_STEP = 1e-5
LAB_EXPERIMENTS = ("cosine-sweep", "snr", "kl-bound", "ablation-suite", "restoring-force", "gradient-audit")

# Checkpoints
CHECKPOINT_MAGIC = b"CGYMCKPT"
CHECKPOINT_VERSION = 1

# Bridge
DEFAULT_BRIDGE_HOST = "127.0.0.1"
DEFAULT_BRIDGE_PORT = 8765
DEFAULT_BRIDGE_TIMEOUT = 30.0  # seconds a client may take per action
BRIDGE_KINDS = ("observation", "action", "result", "end")

# Pathways
PATHWAY_TURN_BUDGET = 3  # turns a time-pressured phase should take
