import copy
import os
from typing import Any, Dict, List, Optional, Sequence, Tuple

SCHEMA_VERSION = "1"

# Every recognised key with its default; the prefix before the first '_' is the group.
DEFAULTS: Dict[str, str] = {
    # Run
    'RUN_SCHEMA': SCHEMA_VERSION,
    'RUN_ALGORITHM': 'si',
    'RUN_ITERATIONS': '200',
    'RUN_SEED': '0',
    'RUN_OUTPUT_DIR': 'runs/default',
    'RUN_OUTPUT_ROOT': '',
    'RUN_WORKERS': '1',
    'RUN_LOG_LEVEL': 'INFO',
    'RUN_HEATMAP_RESOLUTION': '20',
    'RUN_FINAL_WINDOW': '0.1',
    'RUN_EVAL_EPISODES': '10',
    'RUN_DUMP_REPLAY': 'true',

    # Environment and reward wrapper
    'ENV_NAME': 'chain',
    'ENV_REWARD_MODE': 'dense',
    'ENV_MASK_PROB': '0.0',
    'ENV_HORIZON': '',
    'ENV_CHAIN_DISTANCE': '1.0',
    'ENV_CHAIN_SHAPING': 'none',
    'ENV_CHAIN_ACTION_COST': '0.001',
    'ENV_CHAIN_MAX_STEP': '0.1',
    'ENV_BANDIT_P': '0.45',
    'ENV_BANDIT_EPS': '0.1',
    'ENV_MAZE_MAX_SPEED': '0.05',
    'ENV_MAZE_MOTION_NOISE': '0.005',
    'ENV_MAZE_START_NOISE': '0.0',

    # PPO
    'PPO_GAMMA': '0.99',
    'PPO_LAMBDA': '0.95',
    'PPO_CLIP': '0.2',
    'PPO_EPOCHS': '5',
    'PPO_MINIBATCH': '64',
    'PPO_LR': '1e-4',
    'PPO_VALUE_LR': '1e-3',
    'PPO_BATCH_EPISODES': '8',
    'PPO_HIDDEN': '64,64',
    'PPO_INIT_LOG_STD': '0.0',

    # Self-imitation
    'SI_NU': '0.8',
    'SI_CAPACITY': '10',
    'SI_DISC_EPOCHS': '3',
    'SI_DISC_MINIBATCH': '64',
    'SI_DISC_LR': '1e-4',

    # Ensemble
    'SVPG_AGENTS': '8',
    'SVPG_TEMPERATURE': '0.5',
    'SVPG_ALPHA0': '10.0',
    'SVPG_ALPHA_DECAY_END': '0.8',
    'SVPG_RATIO_MODE': 'density',
    'SVPG_DENSITY_EPOCHS': '3',
    'SVPG_DENSITY_MINIBATCH': '64',
    'SVPG_DENSITY_LR': '1e-3',
    'SVPG_REFERENCE_MARGIN': '0.1',
    'SVPG_REFERENCE_MIN_WIDTH': '0.1',
    'SVPG_SEEDS': '',

    # Cross-entropy baseline
    'CEM_POPULATION': '20',
    'CEM_ELITE_FRAC': '0.2',
    'CEM_INIT_STD': '0.5',
    'CEM_EPISODES': '1',
}

_TRUE = {'1', 'true', 'yes', 'on'}
_FALSE = {'0', 'false', 'no', 'off'}


class ConfigError(Exception):
    """Invalid configuration; ``field`` and ``line`` locate the offending entry when known."""

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None,
                 problems: Optional[List[str]] = None):
        self.field = field
        self.line = line
        location = ""
        if field:
            location = f"{field}"
            if line is not None:
                location += f" (line {line})"
            location += ": "
        self.problems = problems or [f"{location}{message}"]
        super().__init__(f"{location}{message}")


class Config:
    """
    Experiment configuration grouped by key prefix.

    Values are layered: predefined defaults, then a KEY=VALUE file, then
    environment variables for known keys, then explicit overrides
    (``--set KEY=VALUE``). The source of every value is remembered so errors
    can point at the file line.
    """

    def __init__(self, path: Optional[str] = None, overrides: Optional[Sequence[str]] = None,
                 group: Optional[str] = None):
        self._path = path
        self._overrides = list(overrides or [])
        self._configs: Dict[str, Any] = {}
        self._groups: Dict[str, Dict[str, Any]] = {}
        self._sources: Dict[str, Tuple[str, Optional[int]]] = {}
        self._group_filter = group.upper() if group else None
        self._load()

    def _load(self):
        self._load_predefined_configs()
        if self._path:
            self._load_file(self._path)
        self._load_env_variables()
        self._apply_overrides(self._overrides)
        self._build_groups()

    def _load_predefined_configs(self):
        """Load predefined configs with default values."""
        for key, value in DEFAULTS.items():
            self._configs[key] = value
            self._sources[key] = ('default', None)

    def _load_file(self, path: str):
        """Parse KEY=VALUE lines; '#' starts a comment, blank lines are ignored."""
        try:
            with open(path, 'r', encoding='utf-8') as fh:
                lines = fh.readlines()
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}")
        for number, raw in enumerate(lines, start=1):
            text = raw.split('#', 1)[0].strip()
            if not text:
                continue
            if '=' not in text:
                raise ConfigError(f"expected KEY=VALUE, got {text!r}", line=number)
            key, value = (part.strip() for part in text.split('=', 1))
            key = key.upper()
            if key not in DEFAULTS:
                raise ConfigError("unknown key", field=key, line=number)
            if key == 'RUN_SCHEMA' and value != SCHEMA_VERSION:
                raise ConfigError(f"schema version {value} not supported (expected {SCHEMA_VERSION})",
                                  field=key, line=number)
            self._configs[key] = value
            self._sources[key] = ('file', number)

    def _load_env_variables(self):
        """Environment variables override defaults and file values, for known keys only."""
        for key in DEFAULTS:
            value = os.environ.get(key)
            if value is not None:
                self._configs[key] = value.strip()
                self._sources[key] = ('env', None)

    def _apply_overrides(self, overrides: Sequence[str]):
        for item in overrides:
            if '=' not in item:
                raise ConfigError(f"override must be KEY=VALUE, got {item!r}")
            key, value = (part.strip() for part in item.split('=', 1))
            self.set(key, value)

    def _build_groups(self):
        """Build groups dictionary from all configs."""
        self._groups = {}
        for key, value in self._configs.items():
            if '_' in key:
                prefix = key.split('_')[0]
                if prefix not in self._groups:
                    self._groups[prefix] = {}
                self._groups[prefix][key] = value

        # If group filter is set, filter configs to only the specified group
        if self._group_filter and self._group_filter in self._groups:
            self._configs = self._groups[self._group_filter].copy()

    def set(self, key: str, value: Any):
        """Explicit override, as given by --set or a sweep axis."""
        key = key.upper()
        if key not in DEFAULTS:
            raise ConfigError("unknown key", field=key)
        self._configs[key] = str(value).strip()
        self._sources[key] = ('flag', None)
        self._build_groups()

    def with_overrides(self, values: Dict[str, Any]) -> "Config":
        clone = copy.deepcopy(self)
        for key, value in values.items():
            clone.set(key, value)
        return clone

    def source(self, key: str) -> Tuple[str, Optional[int]]:
        return self._sources.get(key.upper(), ('unknown', None))

    def _error(self, key: str, message: str) -> ConfigError:
        origin, line = self.source(key)
        return ConfigError(message, field=key, line=line if origin == 'file' else None)

    def get(self, key: str, default: Any = None) -> Any:
        """Get a specific config value by key."""
        return self._configs.get(key, default)

    def get_str(self, key: str) -> str:
        return str(self._configs.get(key, ''))

    def get_int(self, key: str) -> int:
        value = self.get_str(key)
        try:
            return int(value)
        except ValueError:
            raise self._error(key, f"expected an integer, got {value!r}")

    def get_float(self, key: str) -> float:
        value = self.get_str(key)
        try:
            return float(value)
        except ValueError:
            raise self._error(key, f"expected a number, got {value!r}")

    def get_bool(self, key: str) -> bool:
        value = self.get_str(key).lower()
        if value in _TRUE:
            return True
        if value in _FALSE:
            return False
        raise self._error(key, f"expected a boolean, got {value!r}")

    def get_ints(self, key: str) -> List[int]:
        value = self.get_str(key)
        try:
            return [int(part) for part in value.split(',') if part.strip()]
        except ValueError:
            raise self._error(key, f"expected comma-separated integers, got {value!r}")

    def get_floats(self, key: str) -> List[float]:
        value = self.get_str(key)
        try:
            return [float(part) for part in value.split(',') if part.strip()]
        except ValueError:
            raise self._error(key, f"expected comma-separated numbers, got {value!r}")

    def get_all(self) -> Dict[str, Any]:
        """Get all configuration values."""
        return self._configs.copy()

    def get_group(self, prefix: str) -> Dict[str, Any]:
        """Get all configs that start with a specific prefix."""
        return self._groups.get(prefix.upper(), {}).copy()

    def get_all_groups(self) -> Dict[str, Dict[str, Any]]:
        """Get all groups."""
        return {k: v.copy() for k, v in self._groups.items()}

    def dump(self) -> str:
        """Render the effective configuration as a loadable KEY=VALUE file, grouped by prefix."""
        lines = [f"RUN_SCHEMA={SCHEMA_VERSION}"]
        for prefix in ('RUN', 'ENV', 'PPO', 'SI', 'SVPG', 'CEM'):
            lines.append("")
            lines.append(f"# {prefix}")
            for key, value in self._groups.get(prefix, {}).items():
                if key != 'RUN_SCHEMA':
                    lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    def reload(self):
        """Reload the file and environment variables, keeping explicit overrides."""
        self._configs.clear()
        self._groups.clear()
        self._sources.clear()
        self._load()
