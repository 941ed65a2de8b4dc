"""INI run configurations.

Sections:

``[spec]``
    ``L``, ``node_counts`` (comma list), ``channels``, ``spatial_size``,
    ``operators`` (comma list), ``in_channels``, ``num_classes``; or
    ``preset = default`` for the three-stage 18/20/18 layout.
``[data]``
    ``kind = synthetic`` with ``n``, ``num_classes``, ``depth``, ``width``,
    ``seed``, ``batch_size``; or ``kind = npz`` with ``path``.
``[search]``
    any :class:`~ifnas.search.SearchConfig` field. ``madds_budget`` also
    accepts ``none`` or ``chain`` (cost of the plain backbone chain).
``[figure1]``, ``[random]``, ``[count]``
    options of the matching subcommand.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from pathlib import Path

from ifnas.cost import madds
from ifnas.data import Dataset, load_npz, make_synthetic
from ifnas.experiments import Figure1Config
from ifnas.search import SearchConfig
from ifnas.space import OperatorKind, SupernetSpec, chain_architecture


class ConfigError(ValueError):
    pass


def parse(text: str, source: str = "<config>") -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep option case, e.g. ``L``
    try:
        cp.read_string(text, source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    return cp


def read(path: str | Path) -> configparser.ConfigParser:
    return parse(Path(path).read_text(encoding="utf-8"), str(path))


def parse_ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _coerce(name: str, raw: str, kind):
    raw = raw.strip()
    args = typing.get_args(kind)
    if type(None) in args:
        if raw.lower() in ("none", ""):
            return None
        kind = next(a for a in args if a is not type(None))
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            items = [t.strip() for t in raw.split(",") if t.strip()]
            return tuple(int(t) if t.lstrip("-").isdigit() else t for t in items)
        return raw
    except ValueError:
        raise ConfigError(f"option {name}: cannot read {raw!r} as {kind.__name__}") from None


def _section_to(cls, section, skip=()):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in section.items():
        if key in skip:
            continue
        if key not in names:
            raise ConfigError(f"[{section.name}] unknown option {key!r}")
        out[key] = _coerce(key, raw, hints[key])
    return out


def spec_from(cp: configparser.ConfigParser) -> SupernetSpec:
    if not cp.has_section("spec"):
        raise ConfigError("missing [spec] section")
    sec = cp["spec"]
    known = {"preset", "L", "node_counts", "channels", "spatial_size", "operators",
             "in_channels", "num_classes"}
    unknown = set(sec) - known
    if unknown:
        raise ConfigError(f"[spec] unknown options {sorted(unknown)}")
    try:
        L = sec.getint("L")
        kw = {}
        if "operators" in sec:
            kw["operator_set"] = tuple(OperatorKind(o.strip()) for o in sec["operators"].split(","))
        for k in ("in_channels", "num_classes"):
            if k in sec:
                kw[k] = sec.getint(k)
        if sec.get("preset") == "default":
            return SupernetSpec.default(L, **kw)
        if L is None or "node_counts" not in sec:
            raise ConfigError("[spec] needs L and node_counts (or preset = default)")
        return SupernetSpec.uniform(L, parse_ints(sec["node_counts"]),
                                    channels=sec.getint("channels", 4),
                                    spatial_size=sec.getint("spatial_size", 4), **kw)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"[spec] {e}") from None


def dataset_from(cp: configparser.ConfigParser, base: Path | None = None) -> Dataset:
    sec = cp["data"] if cp.has_section("data") else {}
    kind = sec.get("kind", "synthetic")
    batch = int(sec.get("batch_size", 32))
    if kind == "npz":
        if "path" not in sec:
            raise ConfigError("[data] kind = npz needs path")
        p = Path(sec["path"])
        if base is not None and not p.is_absolute():
            p = base / p
        return load_npz(p, batch)
    if kind != "synthetic":
        raise ConfigError(f"[data] unknown kind {kind!r}")
    spec = spec_from(cp)
    return make_synthetic(
        n=int(sec.get("n", 512)),
        num_classes=int(sec.get("num_classes", spec.num_classes)),
        channels=spec.in_channels,
        spatial=spec.stages[0].spatial_size,
        depth=int(sec.get("depth", 6)),
        width=int(sec.get("width", 32)),
        seed=int(sec.get("seed", 0)),
        batch_size=batch,
    )


def resolve_budget(raw, spec: SupernetSpec) -> int | None:
    if raw is None:
        return None
    if isinstance(raw, int):
        return raw
    text = str(raw).strip().lower()
    if text in ("", "none"):
        return None
    if text == "chain":
        return madds(chain_architecture(spec))
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"madds_budget must be an integer, none or chain, got {raw!r}") from None


def search_config_from(cp: configparser.ConfigParser, spec: SupernetSpec) -> SearchConfig:
    if not cp.has_section("search"):
        return SearchConfig()
    sec = cp["search"]
    kw = _section_to(SearchConfig, sec, skip=("madds_budget",))
    if "madds_budget" in sec:
        kw["madds_budget"] = resolve_budget(sec["madds_budget"], spec)
    return SearchConfig(**kw)


def figure1_config_from(cp: configparser.ConfigParser) -> Figure1Config:
    if not cp.has_section("figure1"):
        return Figure1Config()
    kw = _section_to(Figure1Config, cp["figure1"])
    return Figure1Config(**kw)


def options(cp: configparser.ConfigParser, section: str) -> dict[str, str]:
    return dict(cp[section]) if cp.has_section(section) else {}
