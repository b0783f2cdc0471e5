"""
Experiment configuration: one INI file, one validated section per concern.

Values arrive as strings and are coerced by the section serializers; list
fields take comma-separated values and an empty value means "unset" for
nullable fields.
"""
import configparser
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

from rest_framework import serializers
from rest_framework.fields import empty

from detector.serializers import ModelSectionSerializer
from evaluation.serializers import EvalSectionSerializer
from ingest.serializers import IngestSectionSerializer
from rmsl.exceptions import ConfigError
from syngen.serializers import SyngenSectionSerializer
from training.serializers import TrainSectionSerializer
from .serializers import RunSectionSerializer

logger = logging.getLogger(__name__)

SECTION_SERIALIZERS = {
    'run': RunSectionSerializer,
    'ingest': IngestSectionSerializer,
    'syngen': SyngenSectionSerializer,
    'model': ModelSectionSerializer,
    'train': TrainSectionSerializer,
    'eval': EvalSectionSerializer,
}


def _coerce(field, raw):
    if isinstance(field, serializers.ListField):
        return [item.strip() for item in raw.split(',') if item.strip()]
    if raw == '' and field.allow_null:
        return None
    return raw


def _flatten_errors(section, errors):
    flat = {}
    for name, messages in errors.items():
        path = section if name == 'non_field_errors' else f"{section}.{name}"
        if isinstance(messages, dict):
            messages = [f"[{key}] {' '.join(map(str, value))}" for key, value in messages.items()]
        flat[path] = ' '.join(str(m) for m in messages)
    return flat


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    return str(value)


def _ini_value(value):
    if value is None:
        return ''
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (list, tuple)):
        return ', '.join(_ini_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentConfig:
    """Validated sections keyed by name; `ingest` stays empty for synthetic runs"""

    sections: dict
    source_path: str = ''

    def __getitem__(self, section):
        return self.sections[section]

    @property
    def run(self):
        return self.sections['run']

    @property
    def seed(self):
        return self.sections['run']['seed']

    def as_dict(self):
        return _jsonable(self.sections)

    @property
    def config_hash(self):
        canonical = json.dumps(self.as_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def to_ini(self):
        """Fully resolved configuration, loadable with `load_config`"""
        lines = []
        for section, values in self.sections.items():
            if not values:
                continue
            lines.append(f"[{section}]")
            lines.extend(f"{key} = {_ini_value(value)}" for key, value in values.items())
            lines.append('')
        return '\n'.join(lines)

    def save(self, path):
        Path(path).write_text(self.to_ini(), encoding='utf-8')
        return path


def _log_deviations(section, serializer, values):
    for name, field in serializer.fields.items():
        default = field.default
        if default is empty or name not in values:
            continue
        default = default() if callable(default) else default
        if values[name] != default:
            logger.info(f"Deviation from default: {section}.{name} = {values[name]!r} (default {default!r})")


def load_config(path=None, text=None, overrides=None) -> ExperimentConfig:
    """
    Parse and validate an experiment INI file.

    `overrides` maps "section.field" to a string value applied before
    validation. Every problem is reported at once as a ConfigError whose
    details map field paths to messages.
    """
    parser = configparser.ConfigParser(interpolation=None)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}", {'path': str(path)})
        text = path.read_text(encoding='utf-8')
    try:
        parser.read_string(text or '')
    except configparser.Error as e:
        raise ConfigError("Config file is not valid INI", {'parse': str(e)})

    errors = {}
    for dotted, value in (overrides or {}).items():
        section, _, name = dotted.partition('.')
        if section not in SECTION_SERIALIZERS or not name:
            errors[dotted] = 'Unknown override target'
            continue
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, name, str(value))

    for section in parser.sections():
        if section not in SECTION_SERIALIZERS:
            errors[section] = 'Unknown section'

    sections = {}
    source = parser.get('run', 'source', fallback='syngen')
    for section, serializer_class in SECTION_SERIALIZERS.items():
        raw = dict(parser.items(section)) if parser.has_section(section) else {}
        if section == 'ingest' and source != 'cert' and not raw:
            sections[section] = {}
            continue
        serializer = serializer_class()
        unknown = sorted(set(raw) - set(serializer.fields))
        for name in unknown:
            errors[f"{section}.{name}"] = 'Unknown field'
        data = {name: _coerce(serializer.fields[name], value) for name, value in raw.items() if name not in unknown}
        serializer = serializer_class(data=data)
        if not serializer.is_valid():
            errors.update(_flatten_errors(section, serializer.errors))
            continue
        sections[section] = dict(serializer.validated_data)

    if errors:
        raise ConfigError("Invalid configuration", errors)

    for section, values in sections.items():
        _log_deviations(section, SECTION_SERIALIZERS[section](), values)
    return ExperimentConfig(sections=sections, source_path=str(path or ''))
