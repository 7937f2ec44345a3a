"""Command-line front end: config-file driven, reproducible, file-based I/O.

Subcommands: mpt, oracle-sphere, forward, locate, classify build,
classify match.  One JSON config document per run, schema-validated before
any computation; unknown keys are rejected.  Exit codes: 0 ok,
1 computation failure, 2 invalid input.

Every output carries a provenance header (toolkit version, SHA-256 of the
canonicalised config, seed): a comment line in CSVs, a "_provenance" object
in JSON files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .core import Material, ObjectInstance, Scene
from . import mesh as mesh_mod
from . import mpt as mpt_mod
from . import inverse as inv_mod
from . import forward as fwd_mod


class ConfigError(Exception):
    """Invalid configuration or input file (exit code 2)."""


# ---------------------------------------------------------------------------
# config schemas
# ---------------------------------------------------------------------------

_VEC3 = {"type": "array", "items": {"type": "number"},
         "minItems": 3, "maxItems": 3}
_MAT3 = {"type": "array", "minItems": 3, "maxItems": 3, "items": _VEC3}

_MESH_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["type"],
    "properties": {
        "type": {"enum": ["box_scene", "ball", "cylinder", "tetrahedron", "file"]},
        "regions": {"type": "array", "items": {
            "type": "object", "additionalProperties": False,
            "required": ["box", "tag"],
            "properties": {"box": {"type": "array", "minItems": 2, "maxItems": 2,
                                   "items": _VEC3},
                           "tag": {"type": "integer", "minimum": 1}},
        }},
        "divisions": {"type": "number", "exclusiveMinimum": 0},
        "cells_per_diameter": {"type": "integer", "minimum": 2},
        "cells_per_edge": {"type": "integer", "minimum": 1},
        "half_thickness": {"type": "number", "exclusiveMinimum": 0},
        "vertices": {"type": "array", "minItems": 4, "maxItems": 4, "items": _VEC3},
        "truncation_factor": {"type": "number"},
        "grading": {"type": "number", "exclusiveMinimum": 1},
        "max_exterior_layers": {"type": "integer", "minimum": 1},
        "path": {"type": "string"},
    },
}

_MATERIALS_SCHEMA = {
    "type": "array", "minItems": 1,
    "items": {"type": "object", "additionalProperties": False,
              "required": ["tag", "sigma", "mu_r"],
              "properties": {"tag": {"type": "integer", "minimum": 1},
                             "sigma": {"type": "number", "minimum": 0},
                             "mu_r": {"type": "number", "exclusiveMinimum": 0}}},
}

_SOLVER_SCHEMA = {
    "type": "object", "additionalProperties": False,
    "properties": {"method": {"enum": ["direct", "iterative"]},
                   "threads": {"type": "integer", "minimum": 1}},
}

_OBJECT_SCHEMA = {
    "type": "object", "additionalProperties": False,
    "required": ["alpha", "z"],
    "properties": {
        "name": {"type": "string"},
        "alpha": {"type": "number", "exclusiveMinimum": 0},
        "z": _VEC3,
        # either an analytic sphere (sigma, mu_r) or inline MPTs per frequency
        "sigma": {"type": "number", "minimum": 0},
        "mu_r": {"type": "number", "exclusiveMinimum": 0},
        "mpt": {"type": "array", "items": {
            "type": "object", "additionalProperties": False,
            "required": ["f_hz", "M_re", "M_im"],
            "properties": {"f_hz": {"type": "number"},
                           "M_re": _MAT3, "M_im": _MAT3}}},
    },
}

_COILS_SCHEMA = {
    "type": "object", "additionalProperties": False,
    "required": ["grid_n"],
    "properties": {"grid_n": {"type": "integer", "minimum": 2},
                   "half_width": {"type": "number", "exclusiveMinimum": 0},
                   "height": {"type": "number"},
                   "p": _VEC3, "q": _VEC3},
}

_SCHEMAS = {
    "mpt": {
        "type": "object", "additionalProperties": False,
        "required": ["mesh", "materials", "alpha", "frequencies_hz"],
        "properties": {
            "mesh": _MESH_SCHEMA,
            "materials": _MATERIALS_SCHEMA,
            "alpha": {"type": "number", "exclusiveMinimum": 0},
            "frequencies_hz": {"type": "array", "minItems": 2,
                               "items": {"type": "number", "exclusiveMinimum": 0}},
            "solver": _SOLVER_SCHEMA,
            "seed": {"type": "integer", "minimum": 0},
        },
    },
    "oracle-sphere": {
        "type": "object", "additionalProperties": False,
        "required": ["alpha", "sigma", "mu_r", "frequencies_hz"],
        "properties": {
            "alpha": {"type": "number", "exclusiveMinimum": 0},
            "sigma": {"type": "number", "minimum": 0},
            "mu_r": {"type": "number", "exclusiveMinimum": 0},
            "frequencies_hz": {"type": "array", "minItems": 1,
                               "items": {"type": "number", "minimum": 0}},
        },
    },
    "forward": {
        "type": "object", "additionalProperties": False,
        "required": ["objects", "h0", "probes"],
        "properties": {
            "objects": {"type": "array", "minItems": 1, "items": _OBJECT_SCHEMA},
            "frequency_hz": {"type": "number", "exclusiveMinimum": 0},
            "h0": {"type": "object", "additionalProperties": False,
                   "required": ["type"],
                   "properties": {"type": {"enum": ["uniform", "dipole"]},
                                  "h": _VEC3, "s": _VEC3, "p": _VEC3}},
            "probes": {"type": "array", "minItems": 1, "items": _VEC3},
        },
    },
    "locate": {
        "type": "object", "additionalProperties": False,
        "required": ["objects", "coils", "frequency_hz", "grid"],
        "properties": {
            "objects": {"type": "array", "minItems": 1, "items": _OBJECT_SCHEMA},
            "coils": _COILS_SCHEMA,
            "frequency_hz": {"type": "number", "exclusiveMinimum": 0},
            "noise": {"type": "object", "additionalProperties": False,
                      "required": ["level", "reference_index"],
                      "properties": {"level": {"type": "number", "minimum": 0},
                                     "reference_index": {"type": "integer",
                                                         "minimum": 1}}},
            "grid": {"type": "object", "additionalProperties": False,
                     "required": ["plane_z", "half_width", "n"],
                     "properties": {"plane_z": {"type": "number"},
                                    "half_width": {"type": "number",
                                                   "exclusiveMinimum": 0},
                                    "n": {"type": "integer", "minimum": 3}}},
            "n_objects": {"type": "integer", "minimum": 1},
            "gap_threshold": {"type": "number", "exclusiveMinimum": 1},
            "seed": {"type": "integer", "minimum": 0},
        },
    },
    "classify-build": {
        "type": "object", "additionalProperties": False,
        "required": ["candidates", "frequencies_hz"],
        "properties": {
            "candidates": {"type": "array", "minItems": 1, "items": {
                "type": "object", "additionalProperties": False,
                "required": ["name", "mesh", "materials"],
                "properties": {"name": {"type": "string"},
                               "mesh": _MESH_SCHEMA,
                               "materials": _MATERIALS_SCHEMA}}},
            "frequencies_hz": {"type": "array", "minItems": 2,
                               "items": {"type": "number", "exclusiveMinimum": 0}},
            "solver": _SOLVER_SCHEMA,
        },
    },
    "classify-match": {
        "type": "object", "additionalProperties": False,
        "required": ["dictionary", "target"],
        "properties": {
            "dictionary": {"type": "string"},
            "target": {"type": "array", "minItems": 1, "items": {
                "type": "object", "additionalProperties": False,
                "required": ["f_hz", "M_re", "M_im"],
                "properties": {"f_hz": {"type": "number"},
                               "M_re": _MAT3, "M_im": _MAT3}}},
        },
    },
}


def _validate(config, command):
    import jsonschema
    try:
        jsonschema.validate(config, _SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config does not match the {command} schema: "
                          f"{exc.message}") from exc


# ---------------------------------------------------------------------------
# construction helpers
# ---------------------------------------------------------------------------

def _build_mesh(spec, truncation_override=None):
    kind = spec["type"]
    kw = {}
    for key in ("truncation_factor", "grading", "max_exterior_layers"):
        if key in spec:
            kw[key] = spec[key]
    if truncation_override is not None:
        kw["truncation_factor"] = truncation_override
    if kind == "box_scene":
        if "regions" not in spec:
            raise ConfigError("box_scene mesh needs 'regions'")
        regions = [((r["box"][0], r["box"][1]), r["tag"]) for r in spec["regions"]]
        return mesh_mod.generate_box_scene(
            regions, divisions=spec.get("divisions", 2), **kw)
    if kind == "ball":
        return mesh_mod.ball_mesh(
            cells_per_diameter=spec.get("cells_per_diameter", 8), **kw)
    if kind == "cylinder":
        if "half_thickness" not in spec:
            raise ConfigError("cylinder mesh needs 'half_thickness'")
        return mesh_mod.cylinder_mesh(
            spec["half_thickness"],
            cells_per_diameter=spec.get("cells_per_diameter", 8), **kw)
    if kind == "tetrahedron":
        if "vertices" not in spec:
            raise ConfigError("tetrahedron mesh needs 'vertices'")
        return mesh_mod.tetrahedron_mesh(
            spec["vertices"], cells_per_edge=spec.get("cells_per_edge", 6), **kw)
    if kind == "file":
        if "path" not in spec:
            raise ConfigError("file mesh needs 'path'")
        try:
            return mesh_mod.load_mesh(spec["path"])
        except OSError as exc:
            raise ConfigError(f"cannot read mesh file: {exc}") from exc
    raise ConfigError(f"unknown mesh type {kind!r}")


def _build_materials(items):
    return {item["tag"]: Material(item["sigma"], item["mu_r"]) for item in items}


def _build_objects(specs, frequencies):
    objects = []
    for i, spec in enumerate(specs):
        name = spec.get("name", f"object{i}")
        table = {}
        if "mpt" in spec:
            for rec in spec["mpt"]:
                table[rec["f_hz"]] = (np.asarray(rec["M_re"], float)
                                      + 1j * np.asarray(rec["M_im"], float))
            mat = Material(spec.get("sigma", 0.0), spec.get("mu_r", 1.0))
        elif "sigma" in spec and "mu_r" in spec:
            for f in frequencies:
                table[f] = mpt_mod.mpt_sphere_analytic(
                    spec["alpha"], spec["sigma"], spec["mu_r"],
                    2 * np.pi * f).entries
            mat = Material(spec["sigma"], spec["mu_r"])
        else:
            raise ConfigError(
                f"object {name!r} needs either inline 'mpt' records or "
                "'sigma'/'mu_r' for the analytic sphere")
        objects.append(ObjectInstance(
            shape_id=name, alpha=spec["alpha"], z=np.asarray(spec["z"], float),
            materials=(mat,), mpt_by_frequency=table))
    return objects


def _provenance(config, seed):
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return {
        "toolkit_version": __version__,
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "seed": seed,
    }


def _csv_header(prov):
    return (f"# mptkit {prov['toolkit_version']} "
            f"config={prov['config_sha256']} seed={prov['seed']}\n")


def _write_json(path, payload, prov):
    payload = dict(payload)
    payload["_provenance"] = prov
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def _fmt(x):
    return repr(float(x))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_mpt(config, out_dir, seed, threads, truncation):
    mesh = _build_mesh(config["mesh"], truncation)
    materials = _build_materials(config["materials"])
    freqs = np.asarray(config["frequencies_hz"], float)
    method = config.get("solver", {}).get("method", "direct")
    threads = (threads or config.get("solver", {}).get("threads")
               or os.cpu_count() or 1)
    sig = mpt_mod.sweep_spectra(mesh, materials, config["alpha"], freqs,
                                method=method, threads=threads)
    prov = _provenance(config, seed)
    records = [mpt_mod.mpt_record_dict(r) for r in sig.records]
    _write_json(os.path.join(out_dir, "mpt_records.json"),
                {"records": records}, prov)
    with open(os.path.join(out_dir, "spectra.csv"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write(_csv_header(prov))
        mpt_mod.write_spectra_csv(sig, fh)
    return 0


def cmd_oracle_sphere(config, out_dir, seed, threads, truncation):
    freqs = config["frequencies_hz"]
    records = []
    for f in freqs:
        m = mpt_mod.mpt_sphere_analytic(config["alpha"], config["sigma"],
                                        config["mu_r"], 2 * np.pi * f)
        records.append({
            "f_hz": f,
            "alpha": config["alpha"],
            "M_re": m.entries.real.tolist(),
            "M_im": m.entries.imag.tolist(),
        })
    _write_json(os.path.join(out_dir, "oracle_mpt.json"),
                {"records": records}, _provenance(config, seed))
    return 0


def cmd_forward(config, out_dir, seed, threads, truncation):
    frequency = config.get("frequency_hz")
    freq_list = [frequency] if frequency is not None else []
    objects = _build_objects(config["objects"], freq_list)
    scene = Scene(tuple(objects))
    h0_spec = config["h0"]
    if h0_spec["type"] == "uniform":
        if "h" not in h0_spec:
            raise ConfigError("uniform h0 needs 'h'")
        h0 = fwd_mod.uniform_h0(h0_spec["h"])
    else:
        if "s" not in h0_spec or "p" not in h0_spec:
            raise ConfigError("dipole h0 needs 's' and 'p'")
        h0 = fwd_mod.dipole_h0(fwd_mod.DipoleSource(h0_spec["s"], h0_spec["p"]))
    rows = fwd_mod.field_sweep_rows(scene, h0, np.asarray(config["probes"], float),
                                    frequency)
    prov = _provenance(config, seed)
    with open(os.path.join(out_dir, "fields.csv"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write(_csv_header(prov))
        fh.write("x1,x2,x3,Hre1,Him1,Hre2,Him2,Hre3,Him3\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return 0


def cmd_locate(config, out_dir, seed, threads, truncation):
    f = config["frequency_hz"]
    objects = _build_objects(config["objects"], [f])
    scene = Scene(tuple(objects))
    c = config["coils"]
    coils = inv_mod.grid_coil_array(
        c["grid_n"], c.get("half_width", 1.0), c.get("height", 0.0),
        p=c.get("p", (0, 0, 1)), q=c.get("q", (0, 0, 1)))
    a = inv_mod.build_msr(scene, coils, f)
    noise = config.get("noise")
    used_seed = seed if seed is not None else config.get("seed", 0)
    if noise and noise["level"] > 0:
        a = inv_mod.add_noise(a, noise["level"], noise["reference_index"],
                              used_seed)
    est = inv_mod.estimate_object_count(
        a, gap_threshold=config.get("gap_threshold", 10.0))
    n_objects = config.get("n_objects", est.n_hat if est.n_hat >= 1 else 1)
    if 3 * n_objects >= min(coils.K, coils.L):
        raise ValueError(
            f"n_objects = {n_objects} exceeds what {coils.K}x{coils.L} coils "
            "can resolve")

    g = config["grid"]
    u = np.linspace(-g["half_width"], g["half_width"], g["n"])
    X, Y = np.meshgrid(u, u, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), np.full(X.size, g["plane_z"])], axis=1)
    values, flags = inv_mod.music_image(a, pts, n_objects)
    cell = 2.0 * g["half_width"] / (g["n"] - 1)
    peaks = inv_mod.music_peaks(pts, values, n_objects, min_separation=2 * cell)

    prov = _provenance(config, used_seed)
    with open(os.path.join(out_dir, "music_image.csv"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write(_csv_header(prov))
        fh.write("x1,x2,x3,I_MU\n")
        for pt, v in zip(pts, values):
            fh.write(",".join(_fmt(x) for x in (*pt, v)) + "\n")
    _write_json(os.path.join(out_dir, "music_summary.json"), {
        "n_hat": est.n_hat,
        "n_signal_values": est.n_signal_values,
        "gap_found": est.found_gap,
        "n_objects_imaged": n_objects,
        "skipped_points": int(flags.sum()),
        "peaks": [{"z": p.tolist(), "value": v} for p, v in peaks],
    }, prov)
    return 0


def cmd_classify_build(config, out_dir, seed, threads, truncation):
    freqs = np.asarray(config["frequencies_hz"], float)
    candidates = []
    for cand in config["candidates"]:
        mesh = _build_mesh(cand["mesh"], truncation)
        materials = _build_materials(cand["materials"])
        canon = mpt_mod.canonicalize(mesh, materials, shape_id=cand["name"])
        candidates.append((cand["name"], canon))
    dictionary = inv_mod.dictionary_build(candidates, freqs)
    prov = _provenance(config, seed)
    doc = json.loads(inv_mod.dictionary_to_json(dictionary))
    _write_json(os.path.join(out_dir, "dictionary.json"), doc, prov)
    return 0


def cmd_classify_match(config, out_dir, seed, threads, truncation):
    try:
        with open(config["dictionary"], encoding="utf-8") as fh:
            dictionary = inv_mod.dictionary_from_json(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read dictionary: {exc}") from exc
    target = sorted(config["target"], key=lambda r: r["f_hz"])
    freqs = np.asarray([r["f_hz"] for r in target], float)
    tensors = [np.asarray(r["M_re"], float) + 1j * np.asarray(r["M_im"], float)
               for r in target]
    ranking = inv_mod.dictionary_match(tensors, dictionary, frequencies_hz=freqs)
    _write_json(os.path.join(out_dir, "match.json"), {
        "ranking": [{"name": n, "distance": d} for n, d in ranking],
    }, _provenance(config, seed))
    return 0


_COMMANDS = {
    "mpt": cmd_mpt,
    "oracle-sphere": cmd_oracle_sphere,
    "forward": cmd_forward,
    "locate": cmd_locate,
    "classify-build": cmd_classify_build,
    "classify-match": cmd_classify_match,
}


def _parser():
    p = argparse.ArgumentParser(
        prog="mptkit",
        description="Polarizability tensors, field prediction, MUSIC "
                    "localisation and classification for conducting "
                    "permeable objects.")
    sub = p.add_subparsers(dest="command")
    for name in ("mpt", "oracle-sphere", "forward", "locate"):
        sp = sub.add_parser(name)
        _common_flags(sp)
    cp = sub.add_parser("classify")
    csub = cp.add_subparsers(dest="stage")
    for stage in ("build", "match"):
        sp = csub.add_parser(stage)
        _common_flags(sp)
    return p


def _common_flags(sp):
    sp.add_argument("--config", required=True, help="JSON config path")
    sp.add_argument("--out", default=".", help="output directory")
    sp.add_argument("--seed", type=int, default=None, help="RNG seed (u64)")
    sp.add_argument("--threads", type=int, default=None,
                    help="worker thread cap (default: available cores)")
    sp.add_argument("--truncation", type=float, default=None,
                    help="override mesh truncation factor")


def main(argv=None):
    args = _parser().parse_args(argv)
    if args.command is None:
        print("error: a subcommand is required (see --help)", file=sys.stderr)
        return 2
    command = args.command
    if command == "classify":
        if getattr(args, "stage", None) is None:
            print("error: classify needs 'build' or 'match'", file=sys.stderr)
            return 2
        command = f"classify-{args.stage}"

    try:
        with open(args.config, encoding="utf-8") as fh:
            config = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2

    try:
        _validate(config, command)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    try:
        os.makedirs(args.out, exist_ok=True)
        return _COMMANDS[command](config, args.out, args.seed, args.threads,
                                  args.truncation)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"computation failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
