"""Flat key=value config tests: parsing, overrides, digests, typed getters."""

import pytest

from latentclass.config import (ConfigError, apply_overrides, config_digest,
                                dump_config, get_bool, get_float, get_int,
                                get_int_list, get_str, load_config,
                                parse_config_text)


def test_parse_basics():
    cfg = parse_config_text("a.b = 1\n# comment\n\nc = hello  # trailing\n")
    assert cfg == {"a.b": "1", "c": "hello"}


def test_parse_errors_carry_source_and_line():
    with pytest.raises(ConfigError, match=r"f\.cfg:2"):
        parse_config_text("a = 1\nnot a pair\n", source="f.cfg")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("a = 1\na = 2\n")
    with pytest.raises(ConfigError, match="empty key"):
        parse_config_text(" = 3\n")


def test_load_round_trips_through_dump(tmp_path):
    cfg = {"b.two": "2", "a.one": "1"}
    p = tmp_path / "c.cfg"
    p.write_text(dump_config(cfg))
    assert load_config(str(p)) == cfg


def test_apply_overrides_last_wins():
    cfg = apply_overrides({"a": "1"}, ["a=2", "b = x", "a=3"])
    assert cfg == {"a": "3", "b": "x"}
    with pytest.raises(ConfigError, match="key=value"):
        apply_overrides({}, ["oops"])


def test_digest_is_order_independent_and_value_sensitive():
    d1 = config_digest({"a": "1", "b": "2"})
    d2 = config_digest({"b": "2", "a": "1"})
    d3 = config_digest({"a": "1", "b": "3"})
    assert d1 == d2 and d1 != d3 and len(d1) == 64


def test_get_str_choices():
    assert get_str({"k": "b"}, "k", choices=["a", "b"]) == "b"
    with pytest.raises(ConfigError, match="not in"):
        get_str({"k": "z"}, "k", choices=["a", "b"])
    with pytest.raises(ConfigError, match="missing required"):
        get_str({}, "k")


def test_get_int_bounds():
    assert get_int({"k": "5"}, "k", lo=1, hi=10) == 5
    assert get_int({}, "k", default=7) == 7
    with pytest.raises(ConfigError, match="below minimum"):
        get_int({"k": "0"}, "k", lo=1)
    with pytest.raises(ConfigError, match="above maximum"):
        get_int({"k": "11"}, "k", hi=10)
    with pytest.raises(ConfigError, match="not an integer"):
        get_int({"k": "1.5"}, "k")


def test_get_float_bounds():
    assert get_float({"k": "0.25"}, "k") == 0.25
    assert get_float({}, "k", default=2) == 2.0
    with pytest.raises(ConfigError, match="not a number"):
        get_float({"k": "abc"}, "k")
    with pytest.raises(ConfigError, match="below minimum"):
        get_float({"k": "-1"}, "k", lo=0.0)


def test_get_bool_spellings():
    for s in ("1", "true", "yes", "on"):
        assert get_bool({"k": s}, "k") is True
    for s in ("0", "false", "no", "off"):
        assert get_bool({"k": s}, "k") is False
    assert get_bool({}, "k", default=True) is True
    with pytest.raises(ConfigError, match="not a boolean"):
        get_bool({"k": "maybe"}, "k")


def test_get_int_list_separators():
    assert get_int_list({"k": "2/3/4"}, "k") == [2, 3, 4]
    assert get_int_list({"k": "40,60"}, "k", sep=",") == [40, 60]
    assert get_int_list({}, "k", default=[1]) == [1]
    with pytest.raises(ConfigError, match="integer list"):
        get_int_list({"k": "a/b"}, "k")
