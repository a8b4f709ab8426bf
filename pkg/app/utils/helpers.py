# ===== app/utils/helpers.py =====
from datetime import datetime
import hashlib
import json

import numpy as np

from app.errors import ConfigError

def to_jsonable(value):
    """Convert numpy scalars/arrays (and containers of them) to plain JSON types"""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    return value

def canonical_json(doc):
    return json.dumps(to_jsonable(doc), sort_keys=True, separators=(',', ':'))

def config_hash(doc):
    """First 16 hex chars of SHA-256 over the canonical JSON of ``doc``"""
    return hashlib.sha256(canonical_json(doc).encode('utf-8')).hexdigest()[:16]

def validate_required_fields(data, required_fields, where='config'):
    """Raise ConfigError naming the first missing field"""
    for field in required_fields:
        if data.get(field) is None:
            raise ConfigError(f'Field {field} is required in {where}')

def validate_known_fields(data, allowed, where='config'):
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f'Unknown keys in {where}: {", ".join(unknown)}')

def parse_horizons(text):
    """'3,16,100' -> [3, 16, 100]"""
    try:
        horizons = [int(part) for part in str(text).split(',') if part.strip()]
    except ValueError:
        raise ConfigError(f'Invalid horizon list {text!r}')
    if not horizons or min(horizons) < 1:
        raise ConfigError('Horizons must be positive integers')
    return horizons

def format_datetime(dt):
    """Format datetime for reports"""
    if isinstance(dt, datetime):
        return dt.isoformat()
    return dt

def dump_report(doc, out_path=None):
    """UTF-8 JSON to ``out_path``; returns the text so callers can echo it"""
    text = json.dumps(to_jsonable(doc), indent=2, sort_keys=True, ensure_ascii=False)
    if out_path:
        try:
            with open(out_path, 'w', encoding='utf-8') as handle:
                handle.write(text + '\n')
        except OSError as e:
            raise ConfigError(f'Cannot write {out_path}: {e.strerror}')
    return text
