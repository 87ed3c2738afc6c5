from pathlib import Path

repo_root = Path(__file__).parent.parent.resolve()
CONFIG_FILE = repo_root / ".config.yaml"
OUTPUT_ROOT_ENV = "ENVDPO_OUTPUT_ROOT"
LOG_DIR_NAME = "logs"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CHECK = 3
EXIT_IO = 4

NOISE = -1
KERNEL_FALLBACK_BANDWIDTH = 1.0
PROBE_SIZE = 512
INVARIANCE_WINDOW = 100
