"""Command-line entry point: ``voxedit train|edit|eval|stats|synth|gradcheck``.

Settings come from built-in defaults, then an optional TOML file
(``--config``), then flags. Every flag is named after its config key, so
``--lr`` sets ``[train] lr``. Each command writes ``<command>.manifest.json``
to the output directory with the effective settings.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    DescriptorVocab,
    SyntheticSpec,
    embedding_record,
    generate_synthetic,
    load_embeddings,
    parse_annotations,
    save_embeddings,
    dataset_stats,
    write_annotations,
    write_jsonl,
)
from .editor import DEFAULT_ALPHA, LLMConfig, edit_prompt
from .errors import DataError, NumericalError, UsageError, VoxEditError
from .metrics import Source, build_reference_table, export_embedding_dump, export_report, sweep
from .trainer import CHECKPOINT_FORMAT, MODES, Checkpoint, TrainConfig, certify_gradients, train

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

logger = logging.getLogger("voxedit")

MANIFEST_FORMAT = "voxedit.manifest/1"
SECRET_KEYS = {"token", "api_key", "apikey", "key", "password", "secret"}
PATH_KEYS = ("embeddings", "annotations", "vocab", "checkpoint", "resume", "output_dir")


def _defaults() -> dict:
    return {
        "paths": {"embeddings": None, "annotations": None, "vocab": None, "checkpoint": None,
                  "resume": None, "output_dir": "voxedit-out"},
        "train": {f.name: f.default for f in fields(TrainConfig)},
        "llm": {f.name: f.default for f in fields(LLMConfig)},
        "edit": {"speaker": None, "prompt": None, "alpha": DEFAULT_ALPHA, "backend": "lexical",
                 "mode": None, "per_utterance": False},
        "eval": {"grid": "0:0.1:1", "mode": None, "descriptors": None, "sources": None,
                 "holdout": None, "jobs": 1},
        "synth": {f.name: f.default for f in fields(SyntheticSpec)},
        "gradcheck": {"configs": 20, "seed": 0, "mode": "full", "h": 1e-5, "tol": 1e-4,
                      "D": 8, "M": 4, "N": 2, "V": 3, "H": 8, "batch": 4},
    }


def _check_type(where: str, default, value) -> None:
    if default is None or value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, (int, float)):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok and isinstance(default, int) and not isinstance(default, bool) and float(value) != int(value):
            ok = False
    else:
        ok = isinstance(value, type(default)) or isinstance(default, str) and isinstance(value, list)
    if not ok:
        raise UsageError(f"{where} has the wrong type ({type(value).__name__})")


@dataclass
class CliConfig:
    """Effective settings, one dict per TOML section."""

    sections: dict = field(default_factory=_defaults)

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    @classmethod
    def from_toml(cls, path) -> CliConfig:
        path = Path(path)
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except FileNotFoundError:
            raise UsageError(f"config file {path} not found") from None
        except tomllib.TOMLDecodeError as e:
            raise UsageError(f"cannot parse {path}: {e}") from None
        cfg = cls()
        cfg.update(data, origin=str(path))
        # relative paths in a config file are relative to that file
        for k in PATH_KEYS:
            v = cfg["paths"][k]
            if k in data.get("paths", {}) and v and not Path(v).is_absolute():
                cfg["paths"][k] = str(path.parent / v)
        return cfg

    def update(self, data: dict, origin: str = "overrides") -> None:
        for section, values in data.items():
            if section not in self.sections:
                raise UsageError(f"{origin}: unknown section [{section}]")
            if not isinstance(values, dict):
                raise UsageError(f"{origin}: [{section}] must be a table")
            for k, v in values.items():
                if section == "llm" and k.lower() in SECRET_KEYS:
                    raise UsageError(f"{origin}: secrets are read from the environment only "
                                     f"(set ${self['llm']['token_env']}), not llm.{k}")
                if k not in self.sections[section]:
                    raise UsageError(f"{origin}: unknown key {section}.{k}")
                _check_type(f"{origin}: {section}.{k}", self.sections[section][k], v)
                self.sections[section][k] = v

    def require(self, section: str, key: str):
        v = self.sections[section][key]
        if v is None or v == "":
            raise UsageError(f"missing required setting {section}.{key}")
        return v

    def to_json(self) -> dict:
        return copy.deepcopy(self.sections)


# -- argument parsing --------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _opt(p, flag: str, key: str, **kw):
    p.add_argument(flag, dest=key, default=None, **kw)


def _common(p):
    p.add_argument("--config", help="TOML config file")
    p.add_argument("-v", "--verbose", action="store_true")
    _opt(p, "--output-dir", "paths.output_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voxedit", description="Text-prompted voice attribute editing in embedding space.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train the memory network and degree predictor")
    _common(p)
    _opt(p, "--embeddings", "paths.embeddings")
    _opt(p, "--annotations", "paths.annotations")
    _opt(p, "--vocab", "paths.vocab")
    _opt(p, "--checkpoint", "paths.checkpoint", help="output checkpoint path")
    _opt(p, "--resume", "paths.resume", help="continue from this checkpoint")
    for name, typ in (("seed", int), ("steps", int), ("batch-size", int), ("lr", float), ("tau", float),
                      ("M", int), ("N", int), ("H", int), ("lambda-rec", float), ("lambda-align", float),
                      ("weight-decay", float)):
        _opt(p, f"--{name}", f"train.{name.replace('-', '_')}", type=typ)
    _opt(p, "--mode", "train.mode", choices=MODES)
    p.add_argument("--log-every", type=int, default=0)

    p = sub.add_parser("edit", help="edit a speaker's embedding from a text prompt")
    _common(p)
    _opt(p, "--checkpoint", "paths.checkpoint")
    _opt(p, "--embeddings", "paths.embeddings")
    _opt(p, "--speaker", "edit.speaker")
    _opt(p, "--prompt", "edit.prompt")
    _opt(p, "--alpha", "edit.alpha", type=float)
    _opt(p, "--mode", "edit.mode", choices=MODES)
    _opt(p, "--backend", "edit.backend", choices=("lexical", "llm"))
    p.add_argument("--per-utterance", dest="edit.per_utterance", action="store_const", const=True, default=None,
                   help="edit every utterance instead of the speaker mean")
    _opt(p, "--llm-base-url", "llm.base_url")
    _opt(p, "--llm-model", "llm.model")
    p.add_argument("--output", help="edited-embedding JSONL (default: <output_dir>/edited.jsonl)")

    p = sub.add_parser("eval", help="TVAS sweep over editing degrees")
    _common(p)
    _opt(p, "--checkpoint", "paths.checkpoint")
    _opt(p, "--embeddings", "paths.embeddings")
    _opt(p, "--annotations", "paths.annotations")
    _opt(p, "--grid", "eval.grid", help="start:step:stop or comma list (default 0:0.1:1)")
    _opt(p, "--mode", "eval.mode", choices=MODES)
    _opt(p, "--descriptors", "eval.descriptors", help="comma-separated subset")
    _opt(p, "--sources", "eval.sources", help="comma-separated source speakers (default: all)")
    _opt(p, "--holdout", "eval.holdout", help="comma-separated utterance ids used as sources")
    _opt(p, "--jobs", "eval.jobs", type=int)

    p = sub.add_parser("stats", help="annotation statistics")
    _common(p)
    _opt(p, "--annotations", "paths.annotations")
    _opt(p, "--vocab", "paths.vocab")

    p = sub.add_parser("synth", help="write a synthetic corpus with planted attribute directions")
    _common(p)
    for name, typ in (("seed", int), ("num-speakers-per-gender", int), ("num-descriptors", int), ("dim", int),
                      ("utterances-per-speaker", int), ("noise-scale", float), ("threshold", float)):
        _opt(p, f"--{name}", f"synth.{name.replace('-', '_')}", type=typ)

    p = sub.add_parser("gradcheck", help="finite-difference certification of the training gradients")
    _common(p)
    _opt(p, "--configs", "gradcheck.configs", type=int)
    _opt(p, "--seed", "gradcheck.seed", type=int)
    _opt(p, "--mode", "gradcheck.mode", choices=MODES)
    _opt(p, "--tol", "gradcheck.tol", type=float)
    return parser


def _overrides(ns: argparse.Namespace) -> dict:
    out: dict = {}
    for k, v in vars(ns).items():
        if "." in k and v is not None:
            section, key = k.split(".", 1)
            out.setdefault(section, {})[key] = v
    return out


def resolve_config(ns: argparse.Namespace) -> CliConfig:
    cfg = CliConfig.from_toml(ns.config) if ns.config else CliConfig()
    cfg.update(_overrides(ns), origin="command line")
    return cfg


# -- helpers -----------------------------------------------------------------

def parse_grid(spec) -> list[float]:
    """``"0:0.1:1"`` (inclusive) or ``"0,0.5,1"`` or a list of numbers."""
    if isinstance(spec, (list, tuple)):
        vals = [float(v) for v in spec]
    elif ":" in str(spec):
        try:
            start, step, stop = (float(p) for p in str(spec).split(":"))
        except ValueError:
            raise UsageError(f"bad grid {spec!r}; expected start:step:stop") from None
        if step <= 0 or stop < start:
            raise UsageError(f"bad grid {spec!r}")
        n = int(round((stop - start) / step)) + 1
        vals = [round(start + i * step, 12) for i in range(n)]
    else:
        try:
            vals = [float(p) for p in str(spec).split(",") if p.strip()]
        except ValueError:
            raise UsageError(f"bad grid {spec!r}") from None
    if not vals:
        raise UsageError("empty alpha grid")
    return vals


def _list(v) -> list[str] | None:
    if v is None:
        return None
    if isinstance(v, str):
        return [p.strip() for p in v.split(",") if p.strip()]
    return [str(p) for p in v]


def _vocab(cfg: CliConfig) -> DescriptorVocab:
    path = cfg["paths"]["vocab"]
    return DescriptorVocab.from_file(path) if path else DescriptorVocab.default()


def _outdir(cfg: CliConfig) -> Path:
    out = Path(cfg["paths"]["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(cfg: CliConfig, command: str, outputs: dict, extra: dict | None = None) -> Path:
    """Effective config, seed and format versions; no timestamps so reruns compare equal."""
    manifest = {
        "format": MANIFEST_FORMAT,
        "command": command,
        "version": __version__,
        "formats": {"checkpoint": CHECKPOINT_FORMAT, "rng": "numpy.random.PCG64"},
        "numpy": np.__version__,
        "config": cfg.to_json(),
        "outputs": outputs,
        **(extra or {}),
    }
    path = _outdir(cfg) / f"{command}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# -- commands ----------------------------------------------------------------

def cmd_train(cfg: CliConfig, log_every: int = 0) -> int:
    emb = cfg.require("paths", "embeddings")
    ann = cfg.require("paths", "annotations")
    tcfg = TrainConfig.from_dict(dict(cfg["train"]))
    store = load_embeddings(emb)
    vocab = _vocab(cfg)
    tuples = parse_annotations(ann, vocab, store.genders())
    resume = Checkpoint.load(cfg["paths"]["resume"]) if cfg["paths"]["resume"] else None
    ckpt = train(tcfg, store, tuples, vocab, resume=resume, log_every=log_every)
    out = _outdir(cfg)
    ckpt_path = Path(cfg["paths"]["checkpoint"] or out / "checkpoint.json")
    ckpt.save(ckpt_path)
    loss_path = out / "loss.csv"
    ckpt.write_loss_csv(loss_path)
    last = ckpt.history[-1] if ckpt.history else None
    if last:
        print(f"step {last[0]}: total {last[1]:.6g}  rec {last[2]:.6g}  align {last[3]:.6g}")
    print(f"checkpoint: {ckpt_path}")
    write_manifest(cfg, "train", {"checkpoint": str(ckpt_path), "loss_csv": str(loss_path)},
                   {"seed": tcfg.seed, "resolved_train": asdict(ckpt.config)})
    return 0


def cmd_edit(cfg: CliConfig, output=None) -> int:
    ckpt = Checkpoint.load(cfg.require("paths", "checkpoint"))
    store = load_embeddings(cfg.require("paths", "embeddings"))
    e = cfg["edit"]
    speaker, prompt = cfg.require("edit", "speaker"), cfg.require("edit", "prompt")
    if speaker not in store:
        raise DataError(f"unknown speaker {speaker!r}")
    rec = store[speaker]
    alpha = float(e["alpha"])
    mode = e["mode"] or ckpt.config.mode
    llm = LLMConfig(**cfg["llm"])
    if e["per_utterance"]:
        sources = rec.utterances
    else:
        sources = [("mean", rec.mean_embedding())]
    records, extraction = [], None
    for utt, vec in sources:
        s_edit, extraction = edit_prompt(ckpt, vec, prompt, alpha, e["backend"], mode, llm)
        records.append(embedding_record(
            speaker, rec.gender, utt, s_edit, source_speaker=speaker,
            descriptors=list(extraction.descriptors), alpha=alpha, mode=mode,
            provenance=list(extraction.provenance),
        ))
    out = Path(output) if output else _outdir(cfg) / "edited.jsonl"
    write_jsonl(records, out)
    print("descriptors: " + ", ".join(f"{d} ({p})" for d, p in zip(extraction.descriptors, extraction.provenance)))
    print(f"alpha {alpha}  mode {mode}  -> {out} ({len(records)} embedding(s))")
    write_manifest(cfg, "edit", {"edited": str(out)},
                   {"alpha": alpha, "mode": mode, "descriptors": list(extraction.descriptors)})
    return 0


def cmd_eval(cfg: CliConfig) -> int:
    ckpt = Checkpoint.load(cfg.require("paths", "checkpoint"))
    store = load_embeddings(cfg.require("paths", "embeddings"))
    tuples = parse_annotations(cfg.require("paths", "annotations"), ckpt.vocab, store.genders())
    ev = cfg["eval"]
    grid = parse_grid(ev["grid"])
    mode = ev["mode"] or ckpt.config.mode
    holdout = _list(ev["holdout"])
    ref_store, src_store = store.split_utterances(holdout) if holdout else (store, store)
    table = build_reference_table(tuples, ref_store)
    wanted = _list(ev["sources"])
    speakers = wanted if wanted is not None else sorted(src_store.speakers)
    sources = []
    for spk in speakers:
        if spk not in src_store:
            raise DataError(f"unknown source speaker {spk!r}")
        r = src_store[spk]
        if holdout:
            sources += [Source(v, r.gender, spk) for _, v in r.utterances]
        else:
            sources.append(Source(r.mean_embedding(), r.gender, spk))
    descriptors = _list(ev["descriptors"])
    if descriptors is not None:
        if not descriptors:
            raise DataError("empty descriptor set")
        descriptors = [ckpt.vocab.canonical(d) for d in descriptors]
    report = sweep(ckpt, sources, table, descriptors, grid, mode, jobs=int(ev["jobs"]))
    out = _outdir(cfg)
    csv_path, dump_path = out / "tvas.csv", out / "edits.jsonl"
    export_report(report, csv_path)
    export_embedding_dump(ckpt, sources, [r.descriptor for r in report.rows], dump_path, grid, mode)
    for r in report.rows:
        print(f"{r.descriptor:<12} TVAS {r.score:+.5f}")
    write_manifest(cfg, "eval", {"tvas_csv": str(csv_path), "embedding_dump": str(dump_path)},
                   {"grid": grid, "mode": mode})
    return 0


def cmd_stats(cfg: CliConfig) -> int:
    vocab = _vocab(cfg)
    report = dataset_stats(parse_annotations(cfg.require("paths", "annotations"), vocab), vocab)
    print(report.format())
    write_manifest(cfg, "stats", {}, {"num_tuples": report.num_tuples})
    return 0


def cmd_synth(cfg: CliConfig) -> int:
    spec = SyntheticSpec(**cfg["synth"])
    store, tuples, vocab, truth = generate_synthetic(spec)
    out = _outdir(cfg)
    files = {"embeddings": out / "embeddings.jsonl", "annotations": out / "annotations.tsv",
             "vocab": out / "vocab.txt", "truth": out / "truth.json", "config": out / "run.toml"}
    save_embeddings(store, files["embeddings"])
    write_annotations(tuples, files["annotations"])
    vocab.to_file(files["vocab"])
    files["truth"].write_text(json.dumps(truth.to_json()) + "\n", encoding="utf-8")
    files["config"].write_text(
        "[paths]\n"
        'embeddings = "embeddings.jsonl"\n'
        'annotations = "annotations.tsv"\n'
        'vocab = "vocab.txt"\n'
        'output_dir = "run"\n\n'
        "[train]\n"
        f"seed = {spec.seed}\nsteps = 3000\nbatch_size = 32\nlr = 0.02\ntau = 5.0\nM = 16\nN = 4\n",
        encoding="utf-8",
    )
    print(f"{len(store.speakers)} speakers, {len(tuples)} tuples, V={len(vocab)}, D={store.dim} -> {out}")
    write_manifest(cfg, "synth", {k: str(v) for k, v in files.items()}, {"seed": spec.seed})
    return 0


def cmd_gradcheck(cfg: CliConfig) -> int:
    g = dict(cfg["gradcheck"])
    sizes = {k: int(g.pop(k)) for k in ("D", "M", "N", "V", "H", "batch")}
    reports = certify_gradients(int(g["seed"]), int(g["configs"]), float(g["h"]), float(g["tol"]),
                                g["mode"], **sizes)
    worst = max(r.max_error for r in reports)
    for i, r in enumerate(reports):
        print(f"config {i:3d}: max relative error {r.max_error:.3e}")
    ok = all(r.passed for r in reports)
    print(f"{len(reports)} configs, max relative error {worst:.3e}: {'PASS' if ok else 'FAIL'} (tol {g['tol']:g})")
    write_manifest(cfg, "gradcheck", {}, {"max_relative_error": worst, "passed": ok})
    if not ok:
        raise NumericalError(f"gradient check failed: max relative error {worst:.3e}")
    return 0


def main(argv=None) -> int:
    try:
        ns = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(ns)
        if ns.command == "train":
            return cmd_train(cfg, ns.log_every)
        if ns.command == "edit":
            return cmd_edit(cfg, ns.output)
        if ns.command == "eval":
            return cmd_eval(cfg)
        if ns.command == "stats":
            return cmd_stats(cfg)
        if ns.command == "synth":
            return cmd_synth(cfg)
        return cmd_gradcheck(cfg)
    except UsageError as e:
        print(f"voxedit: usage error: {e}", file=sys.stderr)
        return 1
    except NumericalError as e:
        print(f"voxedit: numerical failure: {e}", file=sys.stderr)
        return 3
    except (DataError, OSError) as e:
        print(f"voxedit: data error: {e}", file=sys.stderr)
        return 2
    except VoxEditError as e:
        print(f"voxedit: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
