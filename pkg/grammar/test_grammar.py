"""
Test script to validate the config grammar parses correctly.

Run: python -m grammar.test_grammar
(from the repository root)

Or: pytest grammar/test_grammar.py
"""

from lark import Lark, LarkError

from grammar.config_grammar import CONFIG_GRAMMAR, EXAMPLE_CONFIG, ConfigSyntaxError, parse_config

VALID_SNIPPETS = [
    EXAMPLE_CONFIG,
    "seed = 42\n",
    "[tiers]\nbins = [0, 8, 12, 20]\nrefine = false\n",
    'x = { a = 1, b = "two" }  # inline table\n',
    '"quoted key" = -1.5e3\n',
    "\n\n# only comments\n\n",
]

INVALID_SNIPPETS = [
    ("seed = \n", "missing value"),
    ("seed 42\n", "missing '='"),
    ("[match\n", "unclosed header"),
    ("x = [1,\n2]\n", "multi-line array"),
    ("x = 'single'\n", "single-quoted string"),
]


def test_grammar():
    print("Loading grammar...")
    parser = Lark(CONFIG_GRAMMAR, start="start", parser="lalr")
    print("✓ Grammar loaded successfully\n")

    print("Testing valid snippets:")
    print("-" * 60)
    for text in VALID_SNIPPETS:
        parser.parse(text if text.endswith("\n") else text + "\n")
        print(f"✓ {text.splitlines()[0] if text.strip() else '<blank>'}")

    print("\n" + "=" * 60)
    print("Testing invalid snippets (should be rejected):")
    print("-" * 60)
    for text, reason in INVALID_SNIPPETS:
        try:
            parser.parse(text)
        except LarkError:
            print(f"✓ Correctly rejected: {reason}")
            continue
        raise AssertionError(f"should have failed ({reason}): {text!r}")

    print("-" * 60)


def test_example_config_structure():
    config = parse_config(EXAMPLE_CONFIG)
    assert config["seed"] == 7
    assert config["match"]["caliper_sd"] == 0.2
    assert [p["treat"] for p in config["pair"]] == ["Telstra", "Comcast"]
    assert config["pair"][0]["year"] == 2016
    assert "year" not in config["pair"][1]


def test_duplicate_key_rejected():
    try:
        parse_config("seed = 1\nseed = 2\n")
    except ConfigSyntaxError as e:
        assert "duplicate key" in str(e)
    else:
        raise AssertionError("duplicate key accepted")


if __name__ == "__main__":
    test_grammar()
    test_example_config_structure()
    test_duplicate_key_rejected()
