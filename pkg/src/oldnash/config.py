"""Scenario configuration: INI text -> validated :class:`ScenarioConfig`.

Sections and keys (defaults in brackets)::

    [grid]     nx [16], ny [16], lx [1], ly [1], nt [16], t_final [1]
    [kernel]   nu [1], k [0.5], lambda [1]
    [memory]   scheme [ode]                     ode | trapezoid
    [regions]  leader [0.125 0.375 0.25 0.75]
               followerI, coreI, supportI       x0 x1 y0 y1, I = 1..N
               [followers (0.625 0.875 0.125 0.375), (0.625 0.875 0.625 0.875);
                cores (0.5 1 0 0.5), (0.5 1 0.5 1); supports = cores grown by 0.125]
    [costs]    alpha [0.01]                     one value or one per follower
               mode [nash]                      nash | tracking
               tracking_mu [1]
               target [reachable]               zero | reachable | random
               target_norm [1]
               target_smoothing [0.2]           free-flow time applied to random targets
    [leader]   epsilon [0.2], eps_list [0.5, 0.2, 0.1, 0.05],
               control [zero]                   leader control used by ``nash``: zero | random
               vi_samples [100]
    [run]      seed (mandatory unless given on the command line), trials [10]

Every error carries the offending line when there is one.
"""

import configparser
import re
from dataclasses import dataclass, field

from .errors import ConfigError, OldnashError
from .geometry import GridSpec, Region
from .memory import SCHEMES, kernel_params

_SECTION_RE = re.compile(r"^\s*\[([^\]]*)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s\[][^=:]*?)\s*[=:]")
_INDEXED = re.compile(r"^(follower|core|support)(\d+)$")

DEFAULTS = {
    "grid": {"nx": "16", "ny": "16", "lx": "1.0", "ly": "1.0", "nt": "16", "t_final": "1.0"},
    "kernel": {"nu": "1.0", "k": "0.5", "lambda": "1.0"},
    "memory": {"scheme": "ode"},
    "regions": {"leader": "0.125 0.375 0.25 0.75"},
    "costs": {"alpha": "0.01", "mode": "nash", "tracking_mu": "1.0", "target": "reachable",
              "target_norm": "1.0", "target_smoothing": "0.2"},
    "leader": {"epsilon": "0.2", "eps_list": "0.5, 0.2, 0.1, 0.05", "control": "zero",
               "vi_samples": "100"},
    "run": {"trials": "10"},
}
MANDATORY = {"run": ("seed",)}
DEFAULT_FOLLOWERS = [(0.625, 0.875, 0.125, 0.375), (0.625, 0.875, 0.625, 0.875)]
DEFAULT_CORES = [(0.5, 1.0, 0.0, 0.5), (0.5, 1.0, 0.5, 1.0)]
TAPER = 0.125


@dataclass
class ScenarioConfig:
    grid: GridSpec
    nu: float
    k: float
    lam: float
    scheme: str
    leader: Region
    followers: list
    cores: list
    supports: list
    alphas: list
    mode: str
    tracking_mu: float
    target: str
    target_norm: float
    target_smoothing: float
    epsilon: float
    eps_list: list
    leader_control: str
    vi_samples: int
    seed: int
    trials: int
    lines: dict = field(default_factory=dict, repr=False)

    @property
    def n_followers(self):
        return len(self.followers)

    def as_dict(self):
        return {
            "grid": dict(self.grid.__dict__),
            "kernel": {"nu": self.nu, "k": self.k, "lambda": self.lam},
            "memory": {"scheme": self.scheme},
            "regions": {"leader": list(self.leader.as_tuple()),
                        "followers": [list(r.as_tuple()) for r in self.followers],
                        "cores": [list(r.as_tuple()) for r in self.cores],
                        "supports": [list(r.as_tuple()) for r in self.supports]},
            "costs": {"alpha": list(self.alphas), "mode": self.mode, "tracking_mu": self.tracking_mu,
                      "target": self.target, "target_norm": self.target_norm,
                      "target_smoothing": self.target_smoothing},
            "leader": {"epsilon": self.epsilon, "eps_list": list(self.eps_list),
                       "control": self.leader_control, "vi_samples": self.vi_samples},
            "run": {"seed": self.seed, "trials": self.trials},
        }


def _line_index(text):
    """``{(section, key): line}`` and ``{section: line}`` from a plain scan."""
    keys, sections = {}, {}
    current = None
    for no, raw in enumerate(text.splitlines(), start=1):
        m = _SECTION_RE.match(raw)
        if m:
            current = m.group(1).strip().lower()
            sections.setdefault(current, no)
            continue
        m = _KEY_RE.match(raw)
        if m and current is not None:
            keys.setdefault((current, m.group(1).strip().lower()), no)
    return keys, sections


class _Reader:
    def __init__(self, parser, lines):
        self.parser = parser
        self.keys, self.sections = lines

    def line(self, section, key=None):
        if key is None:
            return self.sections.get(section)
        return self.keys.get((section, key), self.sections.get(section))

    def raw(self, section, key):
        if self.parser.has_option(section, key):
            return self.parser.get(section, key)
        return DEFAULTS.get(section, {}).get(key)

    def value(self, section, key, kind):
        text = self.raw(section, key)
        try:
            return kind(text)
        except (TypeError, ValueError):
            raise ConfigError(f"[{section}] {key}: cannot read {text!r} as {kind.__name__}",
                              "bad_value", self.line(section, key)) from None

    def floats(self, section, key, sep=None):
        text = self.raw(section, key)
        parts = [p for p in re.split(r"[,\s]+" if sep is None else sep, text.strip()) if p]
        try:
            return [float(p) for p in parts]
        except ValueError:
            raise ConfigError(f"[{section}] {key}: expected numbers, got {text!r}",
                              "bad_value", self.line(section, key)) from None

    def choice(self, section, key, options):
        val = self.raw(section, key).strip().lower()
        if val not in options:
            raise ConfigError(f"[{section}] {key}: {val!r} is not one of {', '.join(options)}",
                              "bad_value", self.line(section, key))
        return val

    def region(self, key, text=None):
        vals = self.floats("regions", key) if text is None else [float(x) for x in text]
        if len(vals) != 4:
            raise ConfigError(f"[regions] {key}: need 4 numbers x0 x1 y0 y1",
                              "bad_value", self.line("regions", key))
        try:
            return Region(*vals)
        except OldnashError as exc:
            raise ConfigError(f"[regions] {key}: {exc}", "region", self.line("regions", key)) from None


def _grow(region, by, spec):
    return Region(max(region.x0 - by, 0.0), min(region.x1 + by, spec.lx),
                  max(region.y0 - by, 0.0), min(region.y1 + by, spec.ly))


def parse_config(text, seed=None):
    """Parse and validate; ``seed`` overrides ``[run] seed``."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                       default_section="__defaults__")
    parser.optionxform = str.lower
    try:
        parser.read_string(text)
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if getattr(exc, "errors", None) else None
        raise ConfigError(f"syntax error: {exc.message.splitlines()[0]}", "syntax", line) from None
    except configparser.Error as exc:
        raise ConfigError(f"syntax error: {exc.message.splitlines()[0]}", "syntax",
                          getattr(exc, "lineno", None)) from None
    rd = _Reader(parser, _line_index(text))

    for section in parser.sections():
        if section.lower() not in DEFAULTS:
            raise ConfigError(f"unknown section [{section}]", "unknown_key", rd.line(section.lower()))
        for key in parser.options(section):
            known = key in DEFAULTS[section] or key in MANDATORY.get(section, ())
            if section == "regions" and _INDEXED.match(key):
                known = True
            if not known:
                raise ConfigError(f"unknown key {key!r} in [{section}]", "unknown_key", rd.line(section, key))
    if seed is None:
        for section, keys in MANDATORY.items():
            for key in keys:
                if not parser.has_option(section, key):
                    raise ConfigError(f"missing mandatory key {key!r} in [{section}]", "missing_key",
                                      rd.line(section))
        seed = rd.value("run", "seed", int)
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ConfigError(f"seed must fit in an unsigned 64-bit integer, got {seed}", "bad_value",
                          rd.line("run", "seed"))

    spec = GridSpec(rd.value("grid", "nx", int), rd.value("grid", "ny", int),
                    rd.value("grid", "lx", float), rd.value("grid", "ly", float),
                    rd.value("grid", "nt", int), rd.value("grid", "t_final", float))
    try:
        spec.validate()
    except OldnashError as exc:
        raise ConfigError(str(exc), "bad_value", rd.line("grid")) from None

    nu, k, lam = rd.value("kernel", "nu", float), rd.value("kernel", "k", float), rd.value("kernel", "lambda", float)
    try:
        kernel_params(nu, k, lam)
    except OldnashError as exc:
        raise ConfigError(str(exc), "bad_value", rd.line("kernel")) from None
    scheme = rd.choice("memory", "scheme", SCHEMES)

    domain = Region(0.0, spec.lx, 0.0, spec.ly)
    leader = rd.region("leader")
    indices = sorted({int(m.group(2)) for key in (parser.options("regions") if parser.has_section("regions") else [])
                      if (m := _INDEXED.match(key))})
    if indices:
        if indices != list(range(1, len(indices) + 1)):
            raise ConfigError(f"follower indices must run 1..N, got {indices}", "region", rd.line("regions"))
        followers, cores, supports = [], [], []
        for i in indices:
            if not parser.has_option("regions", f"follower{i}"):
                raise ConfigError(f"missing mandatory key 'follower{i}' in [regions]", "missing_key",
                                  rd.line("regions"))
            fol = rd.region(f"follower{i}")
            core = rd.region(f"core{i}") if parser.has_option("regions", f"core{i}") else fol
            sup = rd.region(f"support{i}") if parser.has_option("regions", f"support{i}") else core
            followers.append(fol)
            cores.append(core)
            supports.append(sup)
    else:
        followers = [Region(*r) for r in DEFAULT_FOLLOWERS]
        cores = [Region(*r) for r in DEFAULT_CORES]
        supports = [_grow(c, TAPER, spec) for c in cores]

    def where(i, kind):
        return rd.line("regions", f"{kind}{i + 1}") if indices else rd.line("regions")

    for name, reg, line in [("leader", leader, rd.line("regions", "leader"))] + \
            [(f"follower{i + 1}", r, where(i, "follower")) for i, r in enumerate(followers)]:
        if not domain.contains(reg):
            raise ConfigError(f"region {name} {reg.as_tuple()} lies outside the domain", "region", line)
        if reg.area <= 0:
            raise ConfigError(f"region {name} is empty", "region", line)
    for i, (core, sup) in enumerate(zip(cores, supports)):
        if not domain.contains(sup):
            raise ConfigError(f"support{i + 1} lies outside the domain", "region", where(i, "support"))
        if not sup.contains(core):
            raise ConfigError(f"core{i + 1} is not inside support{i + 1}", "region", where(i, "core"))
    for i in range(len(followers)):
        for j in range(i + 1, len(followers)):
            if followers[i].overlaps(followers[j]):
                raise ConfigError("follower domains must be disjoint "
                                  f"(follower{i + 1} and follower{j + 1} overlap)", "region", where(j, "follower"))

    alphas = rd.floats("costs", "alpha")
    if len(alphas) == 1:
        alphas = alphas * len(followers)
    if len(alphas) != len(followers):
        raise ConfigError(f"[costs] alpha: need 1 or {len(followers)} values, got {len(alphas)}",
                          "bad_value", rd.line("costs", "alpha"))
    if any(a < 0 for a in alphas):
        raise ConfigError("[costs] alpha must be nonnegative", "bad_value", rd.line("costs", "alpha"))

    eps_list = rd.floats("leader", "eps_list", sep=r"[,\s]+")
    if not eps_list or any(e <= 0 for e in eps_list) or any(a <= b for a, b in zip(eps_list, eps_list[1:])):
        raise ConfigError("[leader] eps_list must be positive and strictly decreasing", "bad_value",
                          rd.line("leader", "eps_list"))
    epsilon = rd.value("leader", "epsilon", float)
    if epsilon <= 0:
        raise ConfigError("[leader] epsilon must be positive", "bad_value", rd.line("leader", "epsilon"))

    cfg = ScenarioConfig(
        grid=spec, nu=nu, k=k, lam=lam, scheme=scheme, leader=leader,
        followers=followers, cores=cores, supports=supports, alphas=alphas,
        mode=rd.choice("costs", "mode", ("nash", "tracking")),
        tracking_mu=rd.value("costs", "tracking_mu", float),
        target=rd.choice("costs", "target", ("zero", "reachable", "random")),
        target_norm=rd.value("costs", "target_norm", float),
        target_smoothing=rd.value("costs", "target_smoothing", float),
        epsilon=epsilon, eps_list=eps_list,
        leader_control=rd.choice("leader", "control", ("zero", "random")),
        vi_samples=rd.value("leader", "vi_samples", int),
        seed=seed, trials=rd.value("run", "trials", int),
        lines=rd.keys,
    )
    if cfg.tracking_mu <= 0:
        raise ConfigError("[costs] tracking_mu must be positive", "bad_value", rd.line("costs", "tracking_mu"))
    if cfg.target_norm < 0 or cfg.target_smoothing < 0:
        raise ConfigError("[costs] target_norm and target_smoothing must be nonnegative", "bad_value",
                          rd.line("costs"))
    if cfg.trials < 1 or cfg.vi_samples < 3:
        raise ConfigError("[run] trials >= 1 and [leader] vi_samples >= 3 required", "bad_value", rd.line("run"))
    return cfg


def load_config(path, seed=None):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}", "syntax") from None
    return parse_config(text, seed=seed)
