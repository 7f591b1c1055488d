import json
import os

import singer
from singer import Transformer
from singer.transform import SchemaMismatch

from mlagcn.exceptions import DataFormatError

SCHEMA_DIR = os.path.join(os.path.dirname(os.path.realpath(__file__)), 'schemas')
SHARED_REFS = ('shared/shift.json',)

_SCHEMA_CACHE = {}


def _read(relative):
    with open(os.path.join(SCHEMA_DIR, relative)) as f:
        return json.load(f)


def load_schema(name):
    """The schema ``schemas/<name>.json`` with shared references resolved."""
    if name not in _SCHEMA_CACHE:
        refs = {ref: _read(ref) for ref in SHARED_REFS}
        _SCHEMA_CACHE[name] = singer.resolve_schema_references(_read('{}.json'.format(name)), refs)
    return _SCHEMA_CACHE[name]


def unknown_keys(record, name):
    return sorted(set(record) - set(load_schema(name)['properties']))


def coerce(record, name, path=None, line_number=None, transformer=None):
    """Coerce ``record`` to the types of schema ``name``; mismatches become DataFormatError."""
    if not isinstance(record, dict):
        raise DataFormatError("expected a JSON object, got {}".format(type(record).__name__),
                              path=path, line_number=line_number)
    schema = load_schema(name)
    try:
        if transformer is not None:
            return transformer.transform(record, schema)
        with Transformer() as fresh:
            return fresh.transform(record, schema)
    except SchemaMismatch as exc:
        raise DataFormatError(str(exc), path=path, line_number=line_number) from exc
