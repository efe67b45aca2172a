"""Run configuration: TOML schema, validation, presets, merging.

A run is described by one structured-text file with nested sections.
``resolve`` layers an optional preset, an optional user file, and
command-line overrides into a single validated ``RunConfig`` whose
``raw`` dict is embedded verbatim in every output file.
"""

import copy
from dataclasses import dataclass, field
from importlib import resources

import tomli

SCHEMA_VERSION = 1

GUESS_KINDS = ("zero", "uniform", "random-normalized",
               "fixed-point-iteration", "file")
FP_PROFILES = ("cosine", "bump-pair")
MODEL_NAMES = ("hkb", "o2", "hk", "von_mises")


class ConfigError(Exception):
    """Invalid configuration; the message names the offending field."""


# section -> key -> (type, default).  A default of _REQUIRED means the key
# must be present whenever the section is used by a command.
_REQUIRED = object()

_NUM = (int, float)

_SCHEMA = {
    "model": {
        "name": (str, _REQUIRED),
    },
    "model.params": None,    # free-form, forwarded to the model factory
    "discretization": {
        "modes_per_axis": (int, 16),
        "quadrature_points": (int, 0),
        "beta_inv": (_NUM, _REQUIRED),
    },
    "deflation": {
        "power": (_NUM, 2.0),
        "shift": (_NUM, 1.0),
        "seed": (int, 0),
        "initial_guess": ((str, list), "zero"),
        "guess_file": (str, ""),
        "max_roots": (int, 12),
        "accept_tol": (_NUM, 1e-9),
        "dedup_tol": (_NUM, 1e-6),
        "pos_tol": (_NUM, 1e-8),
        "fp_profile": (str, "cosine"),
        "fp_damping": (_NUM, 0.5),
        "fp_max_iter": (int, 2000),
        "fp_symmetrize": (bool, False),
    },
    "newton": {
        "step_tol": (_NUM, 1e-10),
        "max_iter": (int, 1000),
        "divergence_cap": (_NUM, 1e8),
    },
    "evolve": {
        "initial": (str, "uniform"),
        "perturbation": (_NUM, 0.0),
        "perturbation_seed": (int, 0),
        "t_final": (_NUM, _REQUIRED),
        "dt": (_NUM, _REQUIRED),
        "target": (str, ""),
    },
    "control": {
        "target": (str, _REQUIRED),
        "initial": (str, "target"),
        "perturbation": (_NUM, 0.0),
        "perturbation_seed": (int, 0),
        "gamma": (_NUM, _REQUIRED),
        "eta": (_NUM, _REQUIRED),
        "total_time": (_NUM, _REQUIRED),
        "window": (_NUM, _REQUIRED),
        "dt": (_NUM, _REQUIRED),
        "delta": (_NUM, 1.0),
        "eps_u": (_NUM, 1e-6),
        "max_iter": (int, 50),
    },
    "output": {
        "directory": (str, "out"),
        "formats": (list, ["json", "csv"]),
        "snapshot_stride": (int, 10),
        "density_points": (int, 0),
        "operator_cache": (str, ""),
    },
    "sweep": None,    # exactly one key: beta_inv or a model parameter
}


@dataclass
class RunConfig:
    raw: dict = field(repr=False)
    model_name: str = ""
    model_params: dict = field(default_factory=dict)
    modes_per_axis: int = 16
    quadrature_points: int = 0
    beta_inv: float = 1.0
    deflation: dict = field(default_factory=dict)
    newton: dict = field(default_factory=dict)
    evolve: dict = None
    control: dict = None
    output: dict = field(default_factory=dict)
    sweep: tuple = None    # (key, [values]) or None

    def with_overrides(self, **scalar):
        """Return a copy with discretization scalars replaced (sweep use)."""
        c = copy.deepcopy(self)
        for k, v in scalar.items():
            if k == "beta_inv":
                c.beta_inv = v
                c.raw["discretization"]["beta_inv"] = v
            else:
                c.model_params[k] = v
                c.raw["model"]["params"][k] = v
        c.sweep = None
        c.raw.pop("sweep", None)
        return c


def load_toml(path):
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomli.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}")


def deep_merge(base, overlay):
    out = copy.deepcopy(base)
    for k, v in overlay.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def list_presets():
    names = []
    for entry in resources.files("mvsteady").joinpath("presets").iterdir():
        if entry.name.endswith(".toml"):
            names.append(entry.name[:-5])
    return sorted(names)


def load_preset(name):
    ref = resources.files("mvsteady").joinpath("presets", f"{name}.toml")
    if not ref.is_file():
        raise ConfigError(
            f"unknown preset '{name}' (available: {', '.join(list_presets())})")
    return tomli.loads(ref.read_text())


def _check_section(section, data):
    spec = _SCHEMA[section]
    if spec is None:
        return dict(data)
    out = {}
    for key, value in data.items():
        if key == "params" and section == "model":
            continue
        if key not in spec:
            raise ConfigError(f"{section}.{key}: unknown key")
        want, _ = spec[key]
        if want is int and isinstance(value, bool):
            raise ConfigError(f"{section}.{key}: expected integer")
        if want is _NUM and isinstance(value, bool):
            raise ConfigError(f"{section}.{key}: expected number")
        if not isinstance(value, want):
            kind = ("number" if want is _NUM else
                    getattr(want, "__name__", "value"))
            raise ConfigError(f"{section}.{key}: expected {kind}")
        out[key] = value
    for key, (want, default) in spec.items():
        if key in out or default is _REQUIRED:
            continue
        out[key] = copy.deepcopy(default)
    return out


def _require(section, data, key):
    if key not in data:
        raise ConfigError(f"{section}.{key}: required key missing")


def validate(raw):
    """Check the nested dict against the schema; return a RunConfig."""
    if not isinstance(raw, dict) or not raw:
        raise ConfigError("empty configuration")
    for section in raw:
        if section == "schema":
            continue
        if section not in _SCHEMA:
            raise ConfigError(f"{section}: unknown section")
        if not isinstance(raw[section], dict):
            raise ConfigError(f"{section}: expected a section (table)")
    schema = raw.get("schema", SCHEMA_VERSION)
    if schema != SCHEMA_VERSION:
        raise ConfigError(f"schema: unsupported version {schema}")

    if "model" not in raw:
        raise ConfigError("model: required section missing")
    model = _check_section("model", raw["model"])
    _require("model", raw["model"], "name")
    if model["name"] not in MODEL_NAMES:
        raise ConfigError(
            f"model.name: unknown model '{model['name']}' "
            f"(expected one of {', '.join(MODEL_NAMES)})")
    params = raw["model"].get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("model.params: expected a section (table)")
    for k, v in params.items():
        if isinstance(v, bool) or not isinstance(v, (_NUM, str)):
            raise ConfigError(f"model.params.{k}: expected number or string")

    if "discretization" not in raw:
        raise ConfigError("discretization: required section missing")
    disc = _check_section("discretization", raw["discretization"])
    _require("discretization", raw["discretization"], "beta_inv")
    if disc["modes_per_axis"] < 1:
        raise ConfigError("discretization.modes_per_axis: must be >= 1")
    if disc["beta_inv"] <= 0:
        raise ConfigError("discretization.beta_inv: must be positive")
    if disc["quadrature_points"] < 0:
        raise ConfigError("discretization.quadrature_points: must be >= 0")

    deflation = _check_section("deflation", raw.get("deflation", {}))
    if deflation["power"] <= 0:
        raise ConfigError("deflation.power: must be positive")
    if deflation["shift"] < 0:
        raise ConfigError("deflation.shift: must be >= 0")
    guesses = deflation["initial_guess"]
    if isinstance(guesses, str):
        guesses = [guesses]
    if not guesses or not all(isinstance(g, str) for g in guesses):
        raise ConfigError("deflation.initial_guess: expected kind or list "
                          "of kinds")
    for g in guesses:
        if g not in GUESS_KINDS:
            raise ConfigError(
                f"deflation.initial_guess: unknown kind '{g}' "
                f"(expected one of {', '.join(GUESS_KINDS)})")
    deflation["initial_guess"] = guesses
    if "file" in guesses and not deflation["guess_file"]:
        raise ConfigError("deflation.guess_file: required for the 'file' "
                          "initial guess")
    if deflation["fp_profile"] not in FP_PROFILES:
        raise ConfigError(
            f"deflation.fp_profile: expected one of {', '.join(FP_PROFILES)}")

    newton = _check_section("newton", raw.get("newton", {}))
    if newton["step_tol"] <= 0:
        raise ConfigError("newton.step_tol: must be positive")

    evolve = None
    if "evolve" in raw:
        evolve = _check_section("evolve", raw["evolve"])
        for key in ("t_final", "dt"):
            _require("evolve", raw["evolve"], key)
        if evolve["dt"] <= 0 or evolve["t_final"] <= 0:
            raise ConfigError("evolve.dt and evolve.t_final must be positive")
        n_steps = evolve["t_final"] / evolve["dt"]
        if abs(n_steps - round(n_steps)) > 1e-9 or round(n_steps) < 1:
            raise ConfigError("evolve.t_final: must be a whole number of "
                              "dt steps")

    control = None
    if "control" in raw:
        control = _check_section("control", raw["control"])
        for key in ("target", "gamma", "eta", "total_time", "window", "dt"):
            _require("control", raw["control"], key)
        if control["dt"] <= 0 or control["window"] <= 0:
            raise ConfigError("control.dt and control.window must be positive")
        n_outer = control["total_time"] / control["window"]
        if abs(n_outer - round(n_outer)) > 1e-9 or round(n_outer) < 1:
            raise ConfigError("control.total_time: must be a whole number "
                              "of windows")
        n_inner = control["window"] / control["dt"]
        if abs(n_inner - round(n_inner)) > 1e-9:
            raise ConfigError("control.window: must be a whole number of "
                              "dt steps")

    output = _check_section("output", raw.get("output", {}))
    if output["snapshot_stride"] < 1:
        raise ConfigError("output.snapshot_stride: must be >= 1")
    if output["density_points"] < 0:
        raise ConfigError("output.density_points: must be >= 0")
    fmts = output["formats"]
    if not fmts or not all(isinstance(f, str) and f in ("json", "csv")
                           for f in fmts):
        raise ConfigError("output.formats: expected a list drawn from "
                          "'json', 'csv'")
    output["formats"] = list(dict.fromkeys(fmts))

    sweep = None
    if "sweep" in raw:
        entries = raw["sweep"]
        if len(entries) != 1:
            raise ConfigError("sweep: exactly one swept key expected")
        key, values = next(iter(entries.items()))
        if not isinstance(values, list) or not values or not all(
                isinstance(v, _NUM) and not isinstance(v, bool)
                for v in values):
            raise ConfigError(f"sweep.{key}: expected a list of numbers")
        if key != "beta_inv" and key not in params:
            raise ConfigError(f"sweep.{key}: not a swept parameter "
                              "(beta_inv or a model.params key)")
        sweep = (key, list(values))

    resolved = {
        "schema": SCHEMA_VERSION,
        "model": {"name": model["name"], "params": dict(params)},
        "discretization": disc,
        "deflation": deflation,
        "newton": newton,
        "output": output,
    }
    if evolve is not None:
        resolved["evolve"] = evolve
    if control is not None:
        resolved["control"] = control
    if sweep is not None:
        resolved["sweep"] = {sweep[0]: sweep[1]}

    return RunConfig(raw=resolved,
                     model_name=model["name"],
                     model_params=dict(params),
                     modes_per_axis=disc["modes_per_axis"],
                     quadrature_points=disc["quadrature_points"],
                     beta_inv=float(disc["beta_inv"]),
                     deflation=deflation,
                     newton=newton,
                     evolve=evolve,
                     control=control,
                     output=output,
                     sweep=sweep)


def resolve(preset=None, config_path=None, out_dir=None, seed=None):
    """Layer preset, config file, and CLI overrides; validate the result."""
    if preset is None and config_path is None:
        raise ConfigError("either a preset or a config file is required")
    raw = {}
    if preset is not None:
        raw = load_preset(preset)
    if config_path is not None:
        raw = deep_merge(raw, load_toml(config_path))
    if out_dir is not None:
        raw.setdefault("output", {})["directory"] = str(out_dir)
    if seed is not None:
        raw.setdefault("deflation", {})["seed"] = int(seed)
    return validate(raw)
