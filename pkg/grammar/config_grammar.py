"""
Config File Grammar

This module defines a Lark grammar for the small TOML-like text format used by
pipeline configs, ranking suites and synthetic dataset specs.

Grammar enforces:
- One statement per line (`key = value`, `[table]`, `[[array.of.tables]]`)
- Whitelisted value types (string, number, boolean, array, inline table)
- Single-line arrays and inline tables
- `#` comments anywhere
"""

import json
from pathlib import Path
from typing import Any

from lark import Lark, LarkError, Transformer, v_args


CONFIG_GRAMMAR = r"""
// =============================================================================
// TOML-LIKE CONFIG GRAMMAR
// =============================================================================

start: (_statement | _NL)*

_statement: table_header _NL
          | array_header _NL
          | pair _NL

// -------------------- Headers --------------------
table_header: "[" key "]"
array_header: "[[" key "]]"

// -------------------- Key / Value --------------------
pair: key "=" value

key: _key_part ("." _key_part)*
_key_part: NAME | ESCAPED_STRING

?value: string
      | number
      | true
      | false
      | array
      | inline_table

array: "[" [value ("," value)* [","]] "]"
inline_table: "{" [pair ("," pair)*] "}"

string: ESCAPED_STRING
number: SIGNED_NUMBER
true: "true"
false: "false"

// -------------------- Tokens --------------------
NAME: /[A-Za-z_][A-Za-z0-9_\-]*/
COMMENT: /#[^\n]*/
_NL: /(\r?\n)+/

%import common.ESCAPED_STRING
%import common.SIGNED_NUMBER
%import common.WS_INLINE
%ignore WS_INLINE
%ignore COMMENT
"""


EXAMPLE_CONFIG = """\
# ranking suite
seed = 7

[match]
caliper_sd = 0.2
continuous = ["tier_mbps", "rwnd_bytes", "min_rtt_ms", "mss_bytes"]

[[pair]]
treat = "Telstra"
control = "Optus"
bin = "0-8"
year = 2016

[[pair]]
treat = "Comcast"
control = "AT&T"
bin = "30-50"
"""


class ConfigSyntaxError(ValueError):
    """Raised when a config file does not conform to the grammar."""


@v_args(inline=True)
class _ConfigTransformer(Transformer):
    """Turns the parse tree into a flat list of statements."""

    def string(self, token):
        return json.loads(token)

    def number(self, token):
        text = str(token)
        if any(c in text for c in ".eE"):
            return float(text)
        return int(text)

    def true(self):
        return True

    def false(self):
        return False

    def key(self, *parts):
        return tuple(json.loads(p) if p.startswith('"') else str(p) for p in parts)

    def pair(self, key, value):
        return ("pair", key, value)

    def array(self, *items):
        return [item for item in items if item is not None]

    def inline_table(self, *pairs):
        table: dict[str, Any] = {}
        for pair in pairs:
            if pair is None:
                continue
            _, key, value = pair
            _assign(table, key, value)
        return table

    def table_header(self, key):
        return ("table", key)

    def array_header(self, key):
        return ("array", key)

    def start(self, *statements):
        return list(statements)


def _descend(root: dict, path: tuple[str, ...]) -> dict:
    node = root
    for part in path:
        child = node.setdefault(part, {})
        if isinstance(child, list):
            child = child[-1]
        if not isinstance(child, dict):
            raise ConfigSyntaxError(f"key '{'.'.join(path)}' is not a table")
        node = child
    return node


def _assign(table: dict, key: tuple[str, ...], value: Any) -> None:
    parent = _descend(table, key[:-1])
    if key[-1] in parent:
        raise ConfigSyntaxError(f"duplicate key '{'.'.join(key)}'")
    parent[key[-1]] = value


_parser = Lark(CONFIG_GRAMMAR, start="start", parser="lalr")


def parse_config(text: str) -> dict[str, Any]:
    """
    Parse config text into a nested dictionary.

    Args:
        text: Config file contents

    Returns:
        Nested dict; `[[name]]` sections become lists of dicts
    """
    try:
        tree = _parser.parse(text if text.endswith("\n") else text + "\n")
    except LarkError as e:
        raise ConfigSyntaxError(str(e)) from e

    root: dict[str, Any] = {}
    current = root
    for statement in _ConfigTransformer().transform(tree):
        kind = statement[0]
        if kind == "pair":
            _assign(current, statement[1], statement[2])
        elif kind == "table":
            current = _descend(root, statement[1])
        else:
            path = statement[1]
            parent = _descend(root, path[:-1])
            entries = parent.setdefault(path[-1], [])
            if not isinstance(entries, list):
                raise ConfigSyntaxError(f"key '{'.'.join(path)}' is not an array of tables")
            entries.append({})
            current = entries[-1]
    return root


def load_config(path: str | Path) -> dict[str, Any]:
    """Read and parse a config file."""
    return parse_config(Path(path).read_text(encoding="utf-8"))
