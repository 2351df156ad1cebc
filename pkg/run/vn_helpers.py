import os
import json

from vn_errors import ConfigError, IoError


REPO_DIR = os.path.abspath(os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))


def resolve_path(filename, subdirs=('presets',)):
    """
    Find `filename` the way the CLI expects users to pass it:
    - an absolute path is used as is
    - else relative to the current directory
    - else relative to this file's directory, then each repo subdirectory in `subdirs`

    Returns the first existing candidate, or None.
    """
    if os.path.isabs(filename):
        return filename if os.path.exists(filename) else None
    current_dir = os.path.dirname(os.path.abspath(__file__))
    candidates = [os.path.abspath(filename), os.path.join(current_dir, filename)]
    candidates += [os.path.join(REPO_DIR, sub, filename) for sub in subdirs]
    for c in candidates:
        if os.path.exists(c):
            return c
    return None


def inner_load_json_from_file(filename):
    path = resolve_path(filename)
    if path is None:
        raise FileNotFoundError(f"JSON file not found: {filename}")
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def load_json_from_file(filename):
    """
    Safe wrapper around `inner_load_json_from_file` that prints helpful errors.
    Returns the parsed object or None on error.
    """
    try:
        return inner_load_json_from_file(filename)
    except FileNotFoundError as e:
        print(f"Error loading JSON file: {e}")
    except json.JSONDecodeError as e:
        print(f"Error decoding JSON from file: {e}")
    except Exception as e:
        print(f"An unexpected error occurred: {e}")
    return None


def require_json(filename):
    """Strict variant: ConfigError instead of None."""
    try:
        return inner_load_json_from_file(filename)
    except FileNotFoundError as e:
        raise ConfigError(str(e)) from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{filename}: invalid JSON ({e})") from None


def canonical_json(data):
    """Sorted keys, no whitespace: stable bytes for checkpoints and diffs."""
    return json.dumps(data, sort_keys=True, separators=(',', ':'), ensure_ascii=False)


def atomic_write_bytes(path, payload):
    """
    Write `payload` to `path` atomically using a .tmp file and os.replace.
    """
    tmp_path = path + '.tmp'
    try:
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)
        with open(tmp_path, 'wb') as f:
            f.write(payload)
        os.replace(tmp_path, path)
    except OSError as e:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise IoError(f"could not write '{path}': {e}") from e


def atomic_write_json(path, data):
    atomic_write_bytes(path, (json.dumps(data, indent=2, sort_keys=True) + '\n').encode('utf-8'))


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode('utf-8'))


def inside_dir(path, root):
    """True when `path` resolves to a location under `root` (commands never write elsewhere)."""
    root = os.path.realpath(root)
    return os.path.commonpath([os.path.realpath(path), root]) == root
