"""Declarative multi-likelihood latent Gaussian models and partition plans."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import yaml

from .gmrf import KINDS, ROLES, EffectSpec

FAMILY_LINKS = {
    "gaussian": "identity",
    "poisson": "log",
    "gamma": "log",
    "bernoulli": "logit",
    "lgcp_lattice": "log",
}
FAMILY_ROLES = {"gaussian": ("prec",), "gamma": ("prec",)}
PRIOR_DISTS = ("normal", "loggamma", "flat", "fixed")
DEFAULT_FIXED_PRECISION = 0.001
PARTITION_MODES = ("by_likelihood_group", "by_row_blocks", "by_time_blocks")


class ConfigError(ValueError):
    """Invalid model configuration; ``location`` points into the document."""

    def __init__(self, location: str, message: str):
        self.location = location
        super().__init__(f"{location}: {message}")


@dataclass(frozen=True)
class FixedEffect:
    name: str
    mean: float = 0.0
    precision: float = DEFAULT_FIXED_PRECISION


@dataclass(frozen=True)
class HyperPrior:
    """Prior of one hyperparameter on its internal scale.

    ``normal`` takes ``mean``/``sd`` on the internal scale, ``loggamma`` puts a
    Gamma(shape, rate) prior on a positive parameter, ``fixed`` pins the
    natural-scale ``value``.
    """

    dist: str
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "params", dict(self.params))

    def __hash__(self):
        return hash((self.dist, tuple(sorted(self.params.items()))))


@dataclass(frozen=True)
class Term:
    """One predictor term: ``intercept``, ``covariate``, ``effect`` or ``share``."""

    kind: str
    name: str
    column: Optional[str] = None
    index: tuple[str, ...] = ()
    scale: float = 1.0

    def __post_init__(self):
        idx = self.index
        if isinstance(idx, str):
            idx = (idx,)
        object.__setattr__(self, "index", tuple(idx))


@dataclass(frozen=True)
class LikelihoodBlock:
    name: str
    family: str
    response: str
    predictor: tuple[Term, ...]
    link: Optional[str] = None
    offset: Optional[str] = None
    table: str = "main"
    hyper: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.link is None:
            object.__setattr__(self, "link", FAMILY_LINKS.get(self.family))
        object.__setattr__(self, "predictor", tuple(self.predictor))
        object.__setattr__(self, "hyper", dict(self.hyper))

    def __hash__(self):
        return hash((self.name, self.family, self.predictor))


@dataclass(frozen=True)
class ShareLink:
    source_effect: str
    target_block: int
    alpha_name: Optional[str] = None
    fixed_alpha: Optional[float] = None

    @property
    def estimated(self) -> bool:
        return self.fixed_alpha is None


@dataclass(frozen=True)
class PartitionPlan:
    mode: str
    groups: tuple = ()
    time_column: Optional[str] = None
    table: Optional[str] = None
    n_groups: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(tuple(g) for g in self.groups))


@dataclass
class ModelSpec:
    blocks: list[LikelihoodBlock]
    effects: dict[str, EffectSpec] = field(default_factory=dict)
    fixed_effects: list[FixedEffect] = field(default_factory=list)
    hyper_priors: dict[str, HyperPrior] = field(default_factory=dict)
    shares: list[ShareLink] = field(default_factory=list)
    partition: Optional[PartitionPlan] = None

    # ------------------------------------------------------------------ queries

    def block_index(self, key) -> int:
        if isinstance(key, (int, np.integer)):
            return int(key)
        for i, b in enumerate(self.blocks):
            if b.name == key:
                return i
        raise KeyError(f"unknown block {key!r}")

    def share_for(self, source: str, block: int) -> ShareLink:
        for link in self.shares:
            if link.source_effect == source and link.target_block == block:
                return link
        raise KeyError(f"no share link for effect {source!r} into block {block}")

    def theta_roles(self) -> dict[str, str]:
        """Map every hyperparameter name in use to its role (``prec``, ``rho``, ...)."""
        roles: dict[str, str] = {}
        for b in self.blocks:
            for role, name in b.hyper.items():
                roles.setdefault(name, role)
        for e in self.effects.values():
            for path, name in e.all_hyper_names().items():
                roles.setdefault(name, path.split(".")[-1])
        for link in self.shares:
            if link.estimated:
                roles.setdefault(link.alpha_name, "alpha")
        return roles

    def theta_names(self) -> list[str]:
        return list(self.theta_roles())

    def free_theta_names(self) -> list[str]:
        return [n for n in self.theta_names() if self.hyper_priors[n].dist != "fixed"]

    def fixed_names(self) -> list[str]:
        return [f.name for f in self.fixed_effects]

    def tables(self) -> list[str]:
        out = []
        for b in self.blocks:
            if b.table not in out:
                out.append(b.table)
        return out

    def validate(self) -> "ModelSpec":
        names = set()
        for i, b in enumerate(self.blocks):
            loc = f"blocks[{i}]"
            if b.name in names:
                raise ConfigError(f"{loc}.name", f"duplicate block name {b.name!r}")
            names.add(b.name)
            if b.family not in FAMILY_LINKS:
                raise ConfigError(f"{loc}.family", f"unknown family {b.family!r}")
            if b.link != FAMILY_LINKS[b.family]:
                raise ConfigError(f"{loc}.link",
                                  f"link {b.link!r} not allowed for family {b.family!r}")
            for role in FAMILY_ROLES.get(b.family, ()):
                if role not in b.hyper:
                    raise ConfigError(f"{loc}.hyper", f"family {b.family!r} needs a {role!r} hyperparameter")
            fixed = set(self.fixed_names())
            for j, t in enumerate(b.predictor):
                tloc = f"{loc}.predictor[{j}]"
                if t.kind in ("intercept", "covariate"):
                    if t.name not in fixed:
                        raise ConfigError(tloc, f"undeclared fixed effect {t.name!r}")
                    if t.kind == "covariate" and not t.column:
                        raise ConfigError(tloc, "covariate term needs a column")
                elif t.kind == "effect":
                    if t.name not in self.effects:
                        raise ConfigError(tloc, f"undeclared effect {t.name!r}")
                    self._check_index(t, tloc)
                elif t.kind == "share":
                    if t.name not in self.effects:
                        raise ConfigError(tloc, f"undeclared effect {t.name!r}")
                    try:
                        self.share_for(t.name, i)
                    except KeyError:
                        raise ConfigError(tloc, f"no share link for {t.name!r} into block {b.name!r}") from None
                    self._check_index(t, tloc)
                else:
                    raise ConfigError(tloc, f"unknown term kind {t.kind!r}")
        for k, link in enumerate(self.shares):
            loc = f"shares[{k}]"
            if link.source_effect not in self.effects:
                raise ConfigError(loc, f"undeclared effect {link.source_effect!r}")
            if not 0 <= link.target_block < len(self.blocks):
                raise ConfigError(loc, f"target block {link.target_block} out of range")
            if link.fixed_alpha is not None and link.alpha_name:
                raise ConfigError(loc, "alpha is either fixed or estimated, not both")
            if link.fixed_alpha is None and not link.alpha_name:
                raise ConfigError(loc, "estimated alpha needs an alpha_name")
        for name, e in self.effects.items():
            _check_effect(e, f"effects.{name}")
        for name in self.theta_names():
            if name not in self.hyper_priors:
                raise ConfigError("hyper_priors", f"no prior for hyperparameter {name!r}")
        for name, p in self.hyper_priors.items():
            if p.dist not in PRIOR_DISTS:
                raise ConfigError(f"hyper_priors.{name}", f"unknown prior {p.dist!r}")
        if self.partition is not None and self.partition.mode not in PARTITION_MODES:
            raise ConfigError("partition.mode", f"unknown partition mode {self.partition.mode!r}")
        return self

    def _check_index(self, t: Term, loc: str):
        e = self.effects[t.name]
        want = 2 if e.kind == "kronecker" else 1
        if len(t.index) != want:
            raise ConfigError(loc, f"effect {t.name!r} needs {want} index column(s)")


def _check_effect(e: EffectSpec, loc: str):
    for role in e.hyper_names:
        if role not in ROLES[e.kind]:
            raise ConfigError(f"{loc}.hyper_names", f"role {role!r} not valid for {e.kind}")
    required = {"iid": ["prec"], "rw1": ["prec"], "rw2": ["prec"], "ar1": ["rho"],
                "lattice_matern": ["range", "sd"]}.get(e.kind, [])
    for role in required:
        if role not in e.hyper_names:
            raise ConfigError(f"{loc}.hyper_names", f"{e.kind} effect needs role {role!r}")
    for k, c in enumerate(e.children):
        _check_effect(c, f"{loc}.children[{k}]")


# --------------------------------------------------------------------------- YAML IO


class _UniqueKeyLoader(yaml.SafeLoader):
    """SafeLoader that rejects duplicate mapping keys."""


def _construct_mapping(loader, node, deep=False):
    seen = {}
    for key_node, _ in node.value:
        key = loader.construct_object(key_node, deep=deep)
        if key in seen:
            raise ConfigError(f"line {key_node.start_mark.line + 1}", f"duplicate key {key!r}")
        seen[key] = True
    return loader.construct_mapping(node, deep)


_UniqueKeyLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _effect_from_doc(doc: Mapping, loc: str) -> EffectSpec:
    if not isinstance(doc, Mapping) or "kind" not in doc:
        raise ConfigError(loc, "effect needs a 'kind'")
    kind = doc["kind"]
    if kind not in KINDS:
        raise ConfigError(f"{loc}.kind", f"unknown effect kind {kind!r}")
    children = tuple(_effect_from_doc(c, f"{loc}.children[{k}]")
                     for k, c in enumerate(doc.get("children", ())))
    try:
        return EffectSpec(kind=kind, size=int(doc.get("size", 0)),
                          grid=tuple(doc["grid"]) if "grid" in doc else None,
                          spacing=float(doc.get("spacing", 1.0)),
                          hyper_names=doc.get("hyper_names", {}), children=children,
                          constrained=doc.get("constrained"))
    except ValueError as exc:
        raise ConfigError(loc, str(exc)) from None


def _effect_to_doc(e: EffectSpec) -> dict:
    out: dict[str, Any] = {"kind": e.kind}
    if e.kind == "lattice_matern":
        out["grid"] = list(e.grid)
        out["spacing"] = e.spacing
    elif e.kind != "kronecker":
        out["size"] = e.size
    if e.hyper_names:
        out["hyper_names"] = dict(e.hyper_names)
    if e.children:
        out["children"] = [_effect_to_doc(c) for c in e.children]
    if e.constrained is not None:
        out["constrained"] = e.constrained
    return out


def _term_from_doc(doc, loc: str) -> Term:
    if doc == "intercept" or (isinstance(doc, Mapping) and "intercept" in doc):
        name = doc["intercept"] if isinstance(doc, Mapping) else "intercept"
        return Term("intercept", name)
    if not isinstance(doc, Mapping):
        raise ConfigError(loc, f"cannot parse predictor term {doc!r}")
    if "covariate" in doc:
        if "beta" not in doc:
            raise ConfigError(loc, "covariate term needs a 'beta' coefficient name")
        return Term("covariate", doc["beta"], column=doc["covariate"])
    for kind in ("effect", "share"):
        if kind in doc:
            return Term(kind, doc[kind], index=doc.get("index", ()), scale=float(doc.get("scale", 1.0)))
    raise ConfigError(loc, f"cannot parse predictor term {dict(doc)!r}")


def _term_to_doc(t: Term):
    if t.kind == "intercept":
        return {"intercept": t.name}
    if t.kind == "covariate":
        return {"covariate": t.column, "beta": t.name}
    out: dict[str, Any] = {t.kind: t.name, "index": list(t.index)}
    if t.scale != 1.0:
        out["scale"] = t.scale
    return out


def spec_from_dict(doc: Mapping) -> ModelSpec:
    if not isinstance(doc, Mapping):
        raise ConfigError("<root>", "configuration must be a mapping")
    known = {"effects", "fixed", "hyper_priors", "blocks", "shares", "partition"}
    for key in doc:
        if key not in known:
            raise ConfigError(str(key), "unknown top-level section")
    if not doc.get("blocks"):
        raise ConfigError("blocks", "at least one likelihood block is required")

    effects = {}
    for name, e in (doc.get("effects") or {}).items():
        effects[name] = _effect_from_doc(e, f"effects.{name}")

    fixed = []
    for k, f in enumerate(doc.get("fixed") or []):
        if isinstance(f, str):
            fixed.append(FixedEffect(f))
        elif isinstance(f, Mapping) and "name" in f:
            fixed.append(FixedEffect(f["name"], float(f.get("mean", 0.0)),
                                     float(f.get("precision", DEFAULT_FIXED_PRECISION))))
        else:
            raise ConfigError(f"fixed[{k}]", "fixed effect needs a name")
    if len({f.name for f in fixed}) != len(fixed):
        raise ConfigError("fixed", "duplicate fixed effect name")

    priors = {}
    for name, p in (doc.get("hyper_priors") or {}).items():
        if not isinstance(p, Mapping) or "dist" not in p:
            raise ConfigError(f"hyper_priors.{name}", "prior needs a 'dist'")
        if p["dist"] not in PRIOR_DISTS:
            raise ConfigError(f"hyper_priors.{name}.dist", f"unknown prior {p['dist']!r}")
        priors[name] = HyperPrior(p["dist"], {k: float(v) for k, v in p.items() if k != "dist"})

    blocks = []
    for i, b in enumerate(doc["blocks"]):
        loc = f"blocks[{i}]"
        if not isinstance(b, Mapping):
            raise ConfigError(loc, "block must be a mapping")
        for key in ("family", "response"):
            if key not in b:
                raise ConfigError(loc, f"missing {key!r}")
        if b["family"] not in FAMILY_LINKS:
            raise ConfigError(f"{loc}.family", f"unknown family {b['family']!r}")
        terms = tuple(_term_from_doc(t, f"{loc}.predictor[{j}]")
                      for j, t in enumerate(b.get("predictor") or []))
        blocks.append(LikelihoodBlock(name=b.get("name", f"block{i}"), family=b["family"],
                                      link=b.get("link"), response=b["response"],
                                      offset=b.get("offset"), predictor=terms,
                                      table=b.get("table", "main"), hyper=b.get("hyper", {})))

    block_names = [b.name for b in blocks]
    shares = []
    for k, s in enumerate(doc.get("shares") or []):
        loc = f"shares[{k}]"
        target = s.get("target_block")
        if isinstance(target, str):
            if target not in block_names:
                raise ConfigError(f"{loc}.target_block", f"unknown block {target!r}")
            target = block_names.index(target)
        if target is None:
            raise ConfigError(loc, "missing 'target_block'")
        fa = s.get("fixed_alpha")
        shares.append(ShareLink(s.get("source_effect"), int(target), s.get("alpha_name"),
                                None if fa is None else float(fa)))

    plan = None
    if doc.get("partition"):
        p = doc["partition"]
        groups = p.get("groups") or ()
        plan = PartitionPlan(mode=p.get("mode"), groups=groups, time_column=p.get("time_column"),
                             table=p.get("table"), n_groups=p.get("n_groups"))

    return ModelSpec(blocks, effects, fixed, priors, shares, plan).validate()


def spec_to_dict(spec: ModelSpec) -> dict:
    out: dict[str, Any] = {
        "effects": {n: _effect_to_doc(e) for n, e in spec.effects.items()},
        "fixed": [{"name": f.name, "mean": f.mean, "precision": f.precision}
                  for f in spec.fixed_effects],
        "hyper_priors": {n: {"dist": p.dist, **p.params} for n, p in spec.hyper_priors.items()},
        "blocks": [],
        "shares": [],
    }
    for b in spec.blocks:
        bd: dict[str, Any] = {"name": b.name, "family": b.family, "link": b.link,
                              "response": b.response, "table": b.table,
                              "predictor": [_term_to_doc(t) for t in b.predictor]}
        if b.offset:
            bd["offset"] = b.offset
        if b.hyper:
            bd["hyper"] = dict(b.hyper)
        out["blocks"].append(bd)
    for s in spec.shares:
        sd: dict[str, Any] = {"source_effect": s.source_effect, "target_block": s.target_block}
        if s.alpha_name:
            sd["alpha_name"] = s.alpha_name
        if s.fixed_alpha is not None:
            sd["fixed_alpha"] = s.fixed_alpha
        out["shares"].append(sd)
    if spec.partition is not None:
        p = spec.partition
        pd_: dict[str, Any] = {"mode": p.mode, "groups": [list(g) for g in p.groups]}
        for key in ("time_column", "table", "n_groups"):
            if getattr(p, key) is not None:
                pd_[key] = getattr(p, key)
        out["partition"] = pd_
    return out


def parse_model_config(text: str) -> ModelSpec:
    """Parse a YAML (or JSON) model configuration into a validated ``ModelSpec``."""
    try:
        doc = yaml.load(text, Loader=_UniqueKeyLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark else "<document>"
        raise ConfigError(where, f"malformed document: {exc}") from None
    return spec_from_dict(doc)


def serialize_model_config(spec: ModelSpec) -> str:
    return yaml.safe_dump(spec_to_dict(spec), sort_keys=False)


# --------------------------------------------------------------------------- data


def as_tables(data) -> dict[str, pd.DataFrame]:
    if isinstance(data, pd.DataFrame):
        return {"main": data}
    return dict(data)


def check_data(spec: ModelSpec, data) -> dict[str, pd.DataFrame]:
    tables = as_tables(data)
    for i, b in enumerate(spec.blocks):
        if b.table not in tables:
            if len(tables) == 1 and len(spec.tables()) == 1:
                tables = {b.table: next(iter(tables.values()))}
            else:
                raise ConfigError(f"blocks[{i}].table", f"no data table {b.table!r}")
        df = tables[b.table]
        cols = [b.response] + ([b.offset] if b.offset else [])
        for t in b.predictor:
            cols += ([t.column] if t.column else []) + list(t.index)
        for c in cols:
            if c not in df.columns:
                raise ConfigError(f"blocks[{i}]", f"data table {b.table!r} has no column {c!r}")
            if df[c].isna().any():
                raise ConfigError(f"blocks[{i}]", f"column {c!r} has missing values")
    return tables


# --------------------------------------------------------------------------- partitioning


@dataclass
class Partition:
    """One element of a dataset partition.

    ``node_maps`` gives, per effect of the sub-spec, the global node index of
    every local node; ``copies`` maps an effect introduced for a scaled share
    to ``(source_effect, ShareLink)``.
    """

    label: int
    spec: ModelSpec
    data: dict[str, pd.DataFrame]
    rows: dict[str, np.ndarray]
    node_maps: dict[str, np.ndarray]
    shared_effects: set = field(default_factory=set)
    local_effects: set = field(default_factory=set)
    copies: dict = field(default_factory=dict)


def _effect_axes(spec: ModelSpec, name: str) -> tuple[str, ...]:
    cols = None
    for b in spec.blocks:
        for t in b.predictor:
            if t.kind in ("effect", "share") and t.name == name:
                if cols is not None and cols != t.index:
                    raise ConfigError("blocks", f"effect {name!r} indexed inconsistently")
                cols = t.index
    return cols or ()


def _slice_effects(spec: ModelSpec, time_col: str, times: np.ndarray):
    """Restrict time-indexed effects to the given contiguous time slices."""
    t0, length = int(times[0]), len(times)
    effects, maps, sliced = {}, {}, set()
    for name, e in spec.effects.items():
        axes = _effect_axes(spec, name)
        if time_col not in axes:
            effects[name] = e
            maps[name] = np.arange(e.dim)
            continue
        sliced.add(name)
        if e.kind == "kronecker":
            k = axes.index(time_col)
            kids = list(e.children)
            kids[k] = kids[k].resized(length)
            new = EffectSpec("kronecker", hyper_names=e.hyper_names, children=tuple(kids))
            sizes = [c.dim for c in e.children]
            local = [np.arange(c.dim) for c in kids]
            local[k] = local[k] + t0
            g0, g1 = np.meshgrid(local[0], local[1], indexing="ij")
            maps[name] = (g0 * sizes[1] + g1).ravel()
            effects[name] = new
        else:
            effects[name] = e.resized(length)
            maps[name] = np.arange(length) + t0
    return effects, maps, sliced


def _blocks_using(spec: ModelSpec, block_ids: Sequence[int], effect: str) -> bool:
    return any(t.kind == "effect" and t.name == effect
               for i in block_ids for t in spec.blocks[i].predictor)


def _sub_spec_for_blocks(spec: ModelSpec, block_ids: Sequence[int]):
    """Sub-model on a subset of likelihood blocks; scaled shares become free copies."""
    blocks, shares, copies = [], [], {}
    effects = {}
    priors = dict(spec.hyper_priors)
    for new_i, i in enumerate(block_ids):
        b = spec.blocks[i]
        terms = []
        for t in b.predictor:
            if t.kind != "share":
                terms.append(t)
                if t.kind == "effect":
                    effects[t.name] = spec.effects[t.name]
                continue
            link = spec.share_for(t.name, i)
            if not link.estimated:
                terms.append(t)
                effects[t.name] = spec.effects[t.name]
                shares.append(replace(link, target_block=new_i))
            elif _blocks_using(spec, block_ids, t.name):
                terms.append(t)
                effects[t.name] = spec.effects[t.name]
                shares.append(replace(link, target_block=new_i))
            else:
                src = spec.effects[t.name]
                copy_name = f"{t.name}@{b.name}"
                rename = {n: f"{n}@{b.name}" for n in src.scale_names()}
                for old, new in rename.items():
                    priors[new] = spec.hyper_priors[old]
                effects[copy_name] = src.renamed(rename)
                copies[copy_name] = (t.name, link)
                terms.append(Term("effect", copy_name, index=t.index, scale=t.scale))
        blocks.append(replace(b, predictor=tuple(terms)))
    ordered = {n: effects[n] for n in list(spec.effects) + list(copies) if n in effects}
    used_fixed = {t.name for b in blocks for t in b.predictor if t.kind in ("intercept", "covariate")}
    fixed = [f for f in spec.fixed_effects if f.name in used_fixed]
    sub = ModelSpec(blocks, ordered, fixed, priors, shares, None)
    sub.hyper_priors = {n: p for n, p in priors.items() if n in sub.theta_roles()}
    return sub.validate(), copies


def partition_dataset(spec: ModelSpec, data, plan: Optional[PartitionPlan] = None) -> list[Partition]:
    """Split model and data into the ordered partitions described by ``plan``."""
    plan = plan or spec.partition
    if plan is None:
        raise ConfigError("partition", "no partition plan given")
    tables = check_data(spec, data)
    parts: list[Partition] = []

    if plan.mode == "by_likelihood_group":
        groups = [[spec.block_index(k) for k in g] for g in plan.groups]
        flat = [i for g in groups for i in g]
        if len(set(flat)) != len(flat):
            raise ConfigError("partition.groups", "likelihood groups overlap")
        if sorted(flat) != list(range(len(spec.blocks))):
            raise ConfigError("partition.groups", "likelihood groups must cover every block")
        for label, g in enumerate(groups, 1):
            if not g:
                raise ConfigError("partition.groups", f"partition {label} is empty")
            sub, copies = _sub_spec_for_blocks(spec, g)
            sub_tables = {t: tables[t] for t in sub.tables()}
            rows = {t: np.arange(len(df)) for t, df in sub_tables.items()}
            maps = {n: np.arange(e.dim) for n, e in sub.effects.items()}
            parts.append(Partition(label, sub, sub_tables, rows, maps, copies=copies))

    elif plan.mode == "by_row_blocks":
        names = spec.tables()
        table = plan.table or names[0]
        if len(names) != 1:
            raise ConfigError("partition", "by_row_blocks needs a single-table model")
        n = len(tables[table])
        groups = [np.asarray(g, dtype=int) for g in plan.groups]
        if not groups and plan.n_groups:
            groups = np.array_split(np.arange(n), int(plan.n_groups))
        flat = np.concatenate(groups) if groups else np.array([], dtype=int)
        if len(np.unique(flat)) != len(flat):
            raise ConfigError("partition.groups", "row groups overlap")
        if len(flat) != n or (n and (flat.min() < 0 or flat.max() >= n)):
            raise ConfigError("partition.groups", "row groups must cover every row exactly once")
        for label, g in enumerate(groups, 1):
            if len(g) == 0:
                raise ConfigError("partition.groups", f"partition {label} is empty")
            sub = copy.deepcopy(spec)
            sub.partition = None
            df = tables[table].iloc[g].reset_index(drop=True)
            maps = {nm: np.arange(e.dim) for nm, e in sub.effects.items()}
            parts.append(Partition(label, sub, {table: df}, {table: g}, maps))

    elif plan.mode == "by_time_blocks":
        tcol = plan.time_column
        if not tcol:
            raise ConfigError("partition.time_column", "by_time_blocks needs a time_column")
        groups = [np.asarray(g, dtype=int) for g in plan.groups]
        flat = np.concatenate(groups)
        if len(np.unique(flat)) != len(flat):
            raise ConfigError("partition.groups", "time groups overlap")
        for label, g in enumerate(groups, 1):
            if len(g) == 0:
                raise ConfigError("partition.groups", f"partition {label} is empty")
            if np.any(np.diff(g) != 1):
                raise ConfigError("partition.groups", f"time group {label} is not contiguous")
        for t, df in tables.items():
            if tcol not in df.columns:
                raise ConfigError("partition.time_column", f"table {t!r} has no column {tcol!r}")
            if not np.isin(df[tcol].to_numpy(), flat).all():
                raise ConfigError("partition.groups", "time groups must cover every row")
        for label, g in enumerate(groups, 1):
            effects, maps, sliced = _slice_effects(spec, tcol, g)
            sub = ModelSpec(list(spec.blocks), effects, list(spec.fixed_effects),
                            dict(spec.hyper_priors), list(spec.shares), None)
            sub_tables, rows = {}, {}
            for t, df in tables.items():
                idx = np.flatnonzero(np.isin(df[tcol].to_numpy(), g))
                if len(idx) == 0:
                    raise ConfigError("partition.groups", f"partition {label} has no rows in {t!r}")
                part = df.iloc[idx].reset_index(drop=True).copy()
                part[tcol] = part[tcol] - int(g[0])
                sub_tables[t] = part
                rows[t] = idx
            parts.append(Partition(label, sub, sub_tables, rows, maps, local_effects=set(sliced)))
    else:
        raise ConfigError("partition.mode", f"unknown partition mode {plan.mode!r}")

    _flag_shared(parts)
    return parts


def _flag_shared(parts: list[Partition]) -> None:
    seen: dict[str, int] = {}
    for p in parts:
        for name in p.spec.effects:
            if name in p.local_effects:
                continue
            key = p.copies[name][0] if name in p.copies else name
            seen[key] = seen.get(key, 0) + 1
    for p in parts:
        for name in p.spec.effects:
            if name in p.local_effects:
                continue
            key = p.copies[name][0] if name in p.copies else name
            (p.shared_effects if seen[key] >= 2 else p.local_effects).add(name)
