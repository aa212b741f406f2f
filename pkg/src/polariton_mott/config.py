"""INI run configuration with unit-suffixed keys, defaults and a canonical form."""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass
from typing import Any, Callable

from .experiments import PhaseSweepConfig, ProtocolConfig
from .model import DeviceParams, ghz_to_ueV


class ConfigError(ValueError):
    pass


def _float(s: str) -> float:
    return float(s)


def _int(s: str) -> int:
    v = float(s)
    if v != int(v):
        raise ValueError(f"{s!r} is not an integer")
    return int(v)


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{s!r} is not a boolean")


def _float_list(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.replace(";", ",").split(",") if x.strip())


def _int_pair(s: str) -> tuple[int, int]:
    vals = tuple(_int(x) for x in s.split(",") if x.strip())
    if len(vals) != 2:
        raise ValueError("expected two comma-separated site numbers")
    return vals


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        s = s.strip().lower()
        if s not in options:
            raise ValueError(f"{s!r} not in {options}")
        return s
    return parse


def _float_or_derived(s: str):
    return "derived" if s.strip().lower() == "derived" else float(s)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "device": {
        "g_meV": (_float, 2.5),
        "t_GHz": (_float, 20.0),
        "Q": (_float, 1e6),
        "tau_b_ns": (_float, 0.5),
        "hbar_omega_a_eV": (_float, 1.596),
        "E_B_meV": (_float, 10.0),
        "a_B_nm": (_float, 10.0),
        "lambda_nm": (_float, 222.0),
        "u_ueV": (_float_or_derived, 200.0),
        "delta_g_ueV": (_float_or_derived, 90.0),
    },
    "lattice": {
        "n_sites": (_int, 6),
        "boundary": (_choice("periodic", "open"), "periodic"),
    },
    "protocol": {
        "delta_start_g": (_float, -3.0),
        "delta_mi_g": (_float, 4.0),
        "delta_trigger_g": (_float, -4.0),
        "switch_center_ps": (_float, 100.0),
        "switch_speed_GHz": (_float, 10.0),
        "trigger_time_ps": (_float, 200.0),
        "trigger_speed_GHz": (_float, 1000.0),
        "trigger_sites": (_choice("odd", "even", "all", "none"), "odd"),
        "window_ps": (_float, 300.0),
        "site_pair": (_int_pair, (1, 3)),
        "complete_emission": (_bool, True),
    },
    "solver": {
        "dt_ps": (_float, 0.01),
        "sample_every_ps": (_float, 1.0),
        "workers": (_int, 1),
        "mcwf_trajectories": (_int, 2000),
        "mcwf_seed": (_int, 0),
        "mcwf_batch": (_int, 2000),
    },
    "sweep": {
        "t_GHz_list": (_float_list, (2.0, 20.0)),
        "delta_min_g": (_float, -4.0),
        "delta_max_g": (_float, 4.0),
        "n_points": (_int, 401),
        "critical_ratio": (_float, 2.04),
    },
    "disorder": {
        "sigma_ueV_list": (_float_list, (0.0, 7.58, 75.8)),  # 0, J/10, J on the superfluid side
        "n_seeds": (_int, 8),
        "base_seed": (_int, 0),
    },
    "output": {
        "svg": (_bool, False),
    },
}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(float(v))
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


@dataclass
class RunConfig:
    values: dict  # section -> key -> parsed value

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def canonical(self) -> str:
        """Normalized text: every section and key in schema order with explicit values."""
        out = io.StringIO()
        for section, keys in SCHEMA.items():
            out.write(f"[{section}]\n")
            for key in keys:
                out.write(f"{key} = {_fmt(self.values[section][key])}\n")
            out.write("\n")
        return out.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    # typed views --------------------------------------------------------
    def device(self) -> DeviceParams:
        d = self.values["device"]
        lat = self.values["lattice"]
        kw = dict(
            g=d["g_meV"] * 1e3,
            t_hop=ghz_to_ueV(d["t_GHz"]),
            Q=d["Q"],
            tau_b=d["tau_b_ns"] * 1e3,
            hbar_omega_a=d["hbar_omega_a_eV"] * 1e6,
            E_B=d["E_B_meV"] * 1e3,
            a_B=d["a_B_nm"],
            wavelength=d["lambda_nm"],
            n_sites=lat["n_sites"],
            boundary=lat["boundary"],
        )
        derived_u = d["u_ueV"] == "derived"
        derived_dg = d["delta_g_ueV"] == "derived"
        if derived_u or derived_dg:
            derived = DeviceParams.with_derived_interactions(**kw)
            kw["u"] = derived.u if derived_u else d["u_ueV"]
            kw["delta_g"] = derived.delta_g if derived_dg else d["delta_g_ueV"]
            kw["interactions_derived"] = derived_u and derived_dg
        else:
            kw["u"] = d["u_ueV"]
            kw["delta_g"] = d["delta_g_ueV"]
        return DeviceParams(**kw)

    def protocol(self) -> ProtocolConfig:
        p = self.values["protocol"]
        s = self.values["solver"]
        lat = self.values["lattice"]
        return ProtocolConfig(
            device=self.device(),
            n_sites=lat["n_sites"],
            boundary=lat["boundary"],
            delta_start_g=p["delta_start_g"],
            delta_mi_g=p["delta_mi_g"],
            delta_trigger_g=p["delta_trigger_g"],
            switch_center=p["switch_center_ps"],
            switch_speed_ghz=p["switch_speed_GHz"],
            trigger_time=p["trigger_time_ps"],
            trigger_speed_ghz=p["trigger_speed_GHz"],
            trigger_sites=p["trigger_sites"],
            t_end=p["window_ps"],
            dt=s["dt_ps"],
            sample_every=s["sample_every_ps"],
            site_pair=p["site_pair"],
            complete_emission=p["complete_emission"],
        )

    def sweep(self) -> PhaseSweepConfig:
        w = self.values["sweep"]
        return PhaseSweepConfig(
            device=self.device(),
            t_hop_ghz=w["t_GHz_list"],
            delta_min_g=w["delta_min_g"],
            delta_max_g=w["delta_max_g"],
            n_points=w["n_points"],
            critical_ratio=w["critical_ratio"],
        )

    def disorder_sigmas(self) -> list[float]:
        sigmas = list(self.values["disorder"]["sigma_ueV_list"])
        if any(s < 0 for s in sigmas):
            raise ValueError("disorder sigma must be >= 0")
        return sigmas


def parse_config(text: str = "") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__unused__")
    parser.optionxform = str  # keys are case sensitive (unit suffixes)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    values = {sec: {k: default for k, (_, default) in keys.items()} for sec, keys in SCHEMA.items()}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            conv = SCHEMA[section][key][0]
            try:
                values[section][key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from None
    for section, key, low in (("solver", "workers", 1), ("solver", "mcwf_trajectories", 1),
                              ("solver", "mcwf_batch", 1), ("disorder", "n_seeds", 1)):
        if values[section][key] < low:
            raise ConfigError(f"[{section}] {key} must be >= {low}")
    cfg = RunConfig(values)
    try:  # surface physical validation errors as config errors
        cfg.protocol()
        cfg.sweep()
        cfg.disorder_sigmas()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
