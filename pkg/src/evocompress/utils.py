import os
import json
import hashlib
from typing import Optional
from datetime import datetime

LOG_NAME = 'run.log'
CONFIG_NAME = 'config.json'
STATE_NAME = 'state.json'
HISTORY_NAME = 'history.jsonl'
BASE_CHECKPOINT = 'base.ptra'

RUN_SUBDIRS = ('individuals', 'cache', 'archive', 'reports')


def setup_run_directory(run_dir: str) -> str:
    """Create run directory structure if it doesn't exist.

    Parameters
    ----------
    run_dir : str
        Path to the run directory

    Returns
    -------
    str
        Absolute path to the run directory
    """
    run_dir = os.path.abspath(run_dir)
    os.makedirs(run_dir, exist_ok=True)

    for sub in RUN_SUBDIRS:
        os.makedirs(os.path.join(run_dir, sub), exist_ok=True)

    # Initialize log file if it doesn't exist
    log_path = os.path.join(run_dir, LOG_NAME)
    if not os.path.exists(log_path):
        with open(log_path, 'w', encoding='utf-8') as f:
            f.write(f"Run created: {datetime.now().isoformat()}\n")
            f.write("=" * 70 + "\n")

    return run_dir


def individual_dir(run_dir: str, individual_id: int) -> str:
    """Directory holding pipeline.json, metrics.json and model.ptra of one individual."""
    return os.path.join(run_dir, 'individuals', f"{int(individual_id):05d}")


def cache_path(run_dir: str, key: str) -> str:
    return os.path.join(run_dir, 'cache', f"{key}.ptra")


def canonical_json(data) -> str:
    """Sorted-key, compact JSON used for hashing."""
    return json.dumps(data, sort_keys=True, separators=(',', ':'))


def config_hash(config: dict) -> str:
    """SHA-256 of the canonical JSON form of a config dictionary.

    Examples
    --------
    >>> config_hash({'a': 1, 'b': 2}) == config_hash({'b': 2, 'a': 1})
    True
    """
    return hashlib.sha256(canonical_json(config).encode('utf-8')).hexdigest()


def write_json(path: str, data) -> str:
    """Write JSON atomically (temp file then rename)."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + '.tmp'
    with open(tmp, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, ensure_ascii=False)
    os.replace(tmp, path)
    return path


def read_json(path: str) -> Optional[dict]:
    if not os.path.exists(path):
        return None
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def write_run_config(run_dir: str, config: dict) -> str:
    """Snapshot the effective run configuration.

    Writes ``config.json`` into the run directory with the creation time
    and the config hash used by ``resume``.

    Parameters
    ----------
    run_dir : str
        Run directory path
    config : dict
        Effective configuration (``RunConfig.to_dict()``)

    Returns
    -------
    str
        Path to the config file
    """
    snapshot = {
        'created': datetime.now().isoformat(),
        'config_hash': config_hash(config),
        'config': config,
    }
    return write_json(os.path.join(run_dir, CONFIG_NAME), snapshot)


def read_run_config(run_dir: str) -> Optional[dict]:
    """Read the config snapshot of a run.

    Returns
    -------
    dict or None
        Snapshot with keys ``created``, ``config_hash`` and ``config``, or
        None if the file doesn't exist or can't be parsed
    """
    config_path = os.path.join(run_dir, CONFIG_NAME)
    if not os.path.exists(config_path):
        return None
    try:
        return read_json(config_path)
    except (OSError, ValueError) as e:
        print(f"Warning: Could not read config file: {e}")
        return None


def log_message(run_dir: str, message: str, level: str = 'INFO'):
    """Append a message to the run log file.

    Parameters
    ----------
    run_dir : str
        Run directory path
    message : str
        Log message
    level : str, default 'INFO'
        Log level: 'INFO', 'WARNING', 'ERROR', 'SUCCESS'

    Examples
    --------
    >>> log_message('./runs/desk', 'Generation 1 evaluated')
    >>> log_message('./runs/desk', 'Individual 7 failed', level='ERROR')
    """
    log_path = os.path.join(run_dir, LOG_NAME)

    timestamp = datetime.now().strftime('%Y-%m-%d %H:%M:%S')
    log_entry = f"[{timestamp}] [{level}] {message}\n"

    with open(log_path, 'a', encoding='utf-8') as f:
        f.write(log_entry)


def read_run_log(run_dir: str) -> Optional[str]:
    """Read the run log file, or None if it doesn't exist."""
    log_path = os.path.join(run_dir, LOG_NAME)

    if not os.path.exists(log_path):
        return None

    try:
        with open(log_path, 'r', encoding='utf-8') as f:
            return f.read()
    except OSError as e:
        print(f"Warning: Could not read log file: {e}")
        return None


def append_history(run_dir: str, record: dict) -> None:
    """Append one generation record to history.jsonl."""
    with open(os.path.join(run_dir, HISTORY_NAME), 'a', encoding='utf-8') as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def read_history(run_dir: str) -> list:
    path = os.path.join(run_dir, HISTORY_NAME)
    if not os.path.exists(path):
        return []
    with open(path, 'r', encoding='utf-8') as f:
        return [json.loads(line) for line in f if line.strip()]


def truncate_history(run_dir: str, generations: int) -> None:
    """Keep only records with ``generation < generations`` (used by resume)."""
    records = [r for r in read_history(run_dir) if r.get('generation', 0) < generations]
    with open(os.path.join(run_dir, HISTORY_NAME), 'w', encoding='utf-8') as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def check_run_status(run_dir: str) -> dict:
    """Check the status of a run directory.

    Parameters
    ----------
    run_dir : str
        Run directory path

    Returns
    -------
    dict
        Status dictionary with keys:
        - exists: bool - run directory exists
        - has_config: bool - config snapshot exists
        - has_log: bool - log file exists
        - has_state: bool - resumable state exists
        - has_base: bool - base checkpoint exists
        - has_archive: bool - archive manifest exists
        - has_reports: bool - report files exist
        - individuals: int - number of individual directories
        - generation: int or None - last completed generation barrier
        - finished: bool - the run reached a stopping criterion
        - config: dict - configuration snapshot if available

    Examples
    --------
    >>> status = check_run_status('./runs/desk')
    >>> if status['has_archive']:
    ...     print("Archive ready for reporting")
    """
    status = {
        'exists': os.path.exists(run_dir),
        'has_config': False,
        'has_log': False,
        'has_state': False,
        'has_base': False,
        'has_archive': False,
        'has_reports': False,
        'individuals': 0,
        'generation': None,
        'finished': False,
        'config': None,
    }

    if not status['exists']:
        return status

    status['has_config'] = os.path.exists(os.path.join(run_dir, CONFIG_NAME))
    if status['has_config']:
        status['config'] = read_run_config(run_dir)

    status['has_log'] = os.path.exists(os.path.join(run_dir, LOG_NAME))
    status['has_base'] = os.path.exists(os.path.join(run_dir, BASE_CHECKPOINT))
    status['has_archive'] = os.path.exists(os.path.join(run_dir, 'archive', 'manifest.json'))

    state_path = os.path.join(run_dir, STATE_NAME)
    status['has_state'] = os.path.exists(state_path)
    if status['has_state']:
        try:
            state = read_json(state_path)
            status['generation'] = state.get('generation')
            status['finished'] = bool(state.get('finished', False))
        except (OSError, ValueError):
            pass

    individuals = os.path.join(run_dir, 'individuals')
    if os.path.exists(individuals):
        status['individuals'] = len([d for d in os.listdir(individuals)
                                     if os.path.isdir(os.path.join(individuals, d))])

    reports = os.path.join(run_dir, 'reports')
    if os.path.exists(reports):
        status['has_reports'] = any(f.startswith('report.') for f in os.listdir(reports))

    return status
