"""Command line: analytical sweeps, simulation sweeps, multi-broadcast abaques.

Every field of the JSON config can be overridden by a flag of the same name
(``--pt_start`` or ``--pt-start``). Exit codes: 0 ok, 1 validation error,
2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import re
import sys
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path

from . import channel
from .channel import AttenuationMatrix, DatasetError, RadioConfig, posture2_running
from .markov import absorption_distribution, analyze, build_chain, expected_tx_state_time
from .multibroadcast import abaque, min_k_for_threshold
from .sim import CsmaConfig, run_batch

BUILTIN_DATASET = "builtin:posture2"
MODES = (channel.NO_INTERFERENCE, channel.GENERAL, "both")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = BUILTIN_DATASET
    sink: int = 1
    sn_dbm: float = -100.0
    pn_dbm: float = -110.0
    n_bit: int = 1016
    bitrate_bps: float = 250_000.0
    tu_seconds: float = 0.32e-3
    w_init: int = 3
    max_attempts: int = 5
    t_setup: float = 0.1e-3
    t_cca: float = 0.1e-3
    mode: str = channel.GENERAL
    pt_start: float = -60.0
    pt_stop: float = -50.0
    pt_step: float = 0.5
    k_values: list[int] = field(default_factory=lambda: list(range(1, 11)))
    n_runs: int = 1000
    seed: int = 0
    n_backoffs: float = 1.5
    threshold: float | None = None
    workers: int = 1

    def validate(self, where=lambda key: "") -> None:
        def fail(key, msg):
            raise ConfigError(f"{where(key)}{key}: {msg}")

        if not self.pt_step > 0:
            fail("pt_step", "must be > 0")
        if self.pt_start > self.pt_stop:
            fail("pt_start", "must be <= pt_stop")
        if self.pt_start <= self.sn_dbm:
            fail("pt_start", f"must exceed sn_dbm ({self.sn_dbm})")
        if self.mode not in MODES:
            fail("mode", f"must be one of {', '.join(MODES)}")
        if not self.k_values or any(int(k) != k or k < 1 for k in self.k_values):
            fail("k_values", "must be a non-empty list of integers >= 1")
        if self.n_runs < 1:
            fail("n_runs", "must be >= 1")
        if self.n_bit < 1:
            fail("n_bit", "must be >= 1")
        if not self.bitrate_bps > 0:
            fail("bitrate_bps", "must be > 0")
        if self.n_backoffs < 0:
            fail("n_backoffs", "must be >= 0")
        if self.workers < 1:
            fail("workers", "must be >= 1")
        if self.threshold is not None and not 0 <= self.threshold <= 1:
            fail("threshold", "must lie in [0, 1]")
        if self.dataset != BUILTIN_DATASET and not Path(self.dataset).is_file():
            fail("dataset", f"file not found: {self.dataset}")
        try:
            self.csma()
        except ValueError as exc:
            fail("csma", str(exc))

    def matrix(self) -> AttenuationMatrix:
        m = posture2_running() if self.dataset == BUILTIN_DATASET else AttenuationMatrix.load_csv(self.dataset)
        if not 0 <= self.sink < m.n_nodes:
            raise ConfigError(f"sink: {self.sink} out of range for {m.n_nodes} nodes")
        return m

    def radio(self, pt_dbm: float) -> RadioConfig:
        return RadioConfig(pt_dbm, self.sn_dbm, self.pn_dbm, self.n_bit, self.bitrate_bps)

    def csma(self) -> CsmaConfig:
        return CsmaConfig(self.tu_seconds, self.w_init, self.max_attempts, self.t_setup, self.t_cca)

    def modes(self) -> list[str]:
        return [channel.NO_INTERFERENCE, channel.GENERAL] if self.mode == "both" else [self.mode]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def pt_grid(start: float, stop: float, step: float) -> list[float]:
    """Inclusive dBm grid stepped in decimal arithmetic."""
    a, b, h = Decimal(str(start)), Decimal(str(stop)), Decimal(str(step))
    out = []
    x = a
    while x <= b:
        out.append(float(x))
        x += h
    return out


def _line_locator(text: str):
    def where(key):
        m = re.search(r'"%s"\s*:' % re.escape(key), text)
        if not m:
            return "config: "
        return f"config line {text.count(chr(10), 0, m.start()) + 1}: "
    return where


def _coerce(name: str, value):
    kind = FIELDS[name].type
    if value is None:
        if "None" in kind:
            return None
        raise ConfigError(f"{name}: may not be null")
    if name == "k_values":
        if isinstance(value, str):
            value = _parse_k_values(value)
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected a list of integers")
        return [int(v) for v in value]
    if kind.startswith("int"):
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return int(value)
    if kind.startswith("float"):
        return float(value)
    return str(value)


def _parse_k_values(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return out


def load_config(path: str | None, overrides: dict) -> ExperimentConfig:
    values: dict = {}
    where = lambda key: ""  # noqa: E731
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}:1: top level must be an object")
        where = _line_locator(text)
        for key, value in raw.items():
            if key not in FIELDS:
                raise ConfigError(f"{where(key)}unknown field {key!r}")
            try:
                values[key] = _coerce(key, value)
            except (ConfigError, ValueError, TypeError) as exc:
                raise ConfigError(f"{where(key)}{exc}") from None
    for key, value in overrides.items():
        if value is not None:
            try:
                values[key] = _coerce(key, value)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"--{key}: {exc}") from None
    cfg = ExperimentConfig(**values)
    cfg.validate(where)
    return cfg


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def render(rows: list[dict], cfg: ExperimentConfig, fmt: str, extra: dict | None = None) -> str:
    if fmt == "json":
        doc = {"config": cfg.to_dict(), "rows": rows}
        if extra:
            doc.update(extra)
        return json.dumps(doc, indent=1) + "\n"
    buf = io.StringIO()
    buf.write("# config: " + json.dumps(cfg.to_dict(), sort_keys=True) + "\n")
    for key, value in (extra or {}).items():
        buf.write(f"# {key}: {json.dumps(value, sort_keys=True)}\n")
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})
    return buf.getvalue()


def read_csv_output(text: str) -> list[dict]:
    """Parse CSV written by :func:`render`, skipping ``#`` metadata lines."""
    body = [line for line in text.splitlines() if not line.startswith("#")]
    rows = []
    for rec in csv.DictReader(body):
        rows.append({k: (float(v) if v not in ("",) and k != "mode" else (v or None)) for k, v in rec.items()})
    return rows


def cmd_analyze(cfg: ExperimentConfig) -> list[dict]:
    matrix = cfg.matrix()
    csma = cfg.csma()
    rows = []
    for mode in cfg.modes():
        for pt in pt_grid(cfg.pt_start, cfg.pt_stop, cfg.pt_step):
            radio = cfg.radio(pt)
            ett = expected_tx_state_time(radio, csma, cfg.n_backoffs)
            met = analyze(build_chain(matrix, radio, cfg.sink, ett, mode))
            row = {"mode": mode, "pt_dbm": pt, "cover_probability": met.cover_probability,
                   "average_cover_number": met.average_cover_number}
            row.update({f"hit_{j}": p for j, p in met.hitting.items()})
            row["average_cover_time"] = met.average_cover_time
            row["mean_tx_state_time"] = ett
            rows.append(row)
    return rows


def cmd_simulate(cfg: ExperimentConfig) -> list[dict]:
    matrix = cfg.matrix()
    csma = cfg.csma()
    rows = []
    for pt in pt_grid(cfg.pt_start, cfg.pt_stop, cfg.pt_step):
        b = run_batch(matrix, cfg.radio(pt), csma, cfg.sink, cfg.n_runs, cfg.seed, cfg.workers)
        row = {"pt_dbm": pt, "n_runs": b.n_runs,
               "cover_probability": b.cover_probability.mean, "cover_probability_se": b.cover_probability.stderr,
               "cover_number": b.cover_number.mean, "cover_number_se": b.cover_number.stderr}
        for j, e in b.hitting.items():
            row[f"hit_{j}"] = e.mean
            row[f"hit_{j}_se"] = e.stderr
        row["cover_time"] = b.cover_time.mean if b.cover_time else None
        row["cover_time_se"] = b.cover_time.stderr if b.cover_time else None
        row["mean_backoff_count"] = b.mean_backoff_count
        rows.append(row)
    return rows


def cmd_abaque(cfg: ExperimentConfig) -> tuple[list[dict], dict]:
    matrix = cfg.matrix()
    csma = cfg.csma()
    rows = []
    extra = {}
    for mode in cfg.modes():
        dists = {}
        for pt in pt_grid(cfg.pt_start, cfg.pt_stop, cfg.pt_step):
            radio = cfg.radio(pt)
            ett = expected_tx_state_time(radio, csma, cfg.n_backoffs)
            dists[pt] = absorption_distribution(build_chain(matrix, radio, cfg.sink, ett, mode))
        table = abaque(dists, cfg.k_values)
        for (pt, k), p in sorted(table.items()):
            row = {"mode": mode} if cfg.mode == "both" else {}
            row.update(pt_dbm=pt, k=k, cover_probability=p)
            rows.append(row)
        if cfg.threshold is not None:
            extra[f"min_k_{mode}"] = {repr(pt): k for pt, k in min_k_for_threshold(table, cfg.threshold).items()}
    return rows, extra


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wbancast", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--format", choices=("csv", "json"), default="csv")
        sp.add_argument("-o", "--output", help="write here instead of stdout")
        for name, f in FIELDS.items():
            flags = [f"--{name}"] + ([f"--{name.replace('_', '-')}"] if "_" in name else [])
            sp.add_argument(*flags, dest=name, default=None, metavar=name.upper())

    for name, text in (("analyze", "metrics of the Markov model over a PT sweep"),
                       ("simulate", "CSMA/CA simulation estimates over a PT sweep"),
                       ("abaque", "multi-broadcast cover probability over PT x K")):
        common(sub.add_parser(name, help=text))
    vd = sub.add_parser("validate-dataset", help="check an attenuation CSV")
    vd.add_argument("path")
    vd.add_argument("--n_nodes", "--n-nodes", type=int, default=None)
    return p


def _emit(text: str, output: str | None) -> None:
    if output:
        Path(output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate-dataset":
            m = AttenuationMatrix.load_csv(args.path, args.n_nodes)
            print(f"ok: {m.n_nodes} nodes, {m.n_nodes * (m.n_nodes - 1) // 2} pairs")
            return 0
        overrides = {name: getattr(args, name) for name in FIELDS}
        cfg = load_config(args.config, overrides)
        extra = None
        if args.command == "analyze":
            rows = cmd_analyze(cfg)
        elif args.command == "simulate":
            rows = cmd_simulate(cfg)
        else:
            rows, extra = cmd_abaque(cfg)
            for key, value in extra.items():
                print(f"{key}: {value}", file=sys.stderr)
        _emit(render(rows, cfg, args.format, extra), args.output)
        return 0
    except (ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
