"""Command-line entry point: ``protosed {extract,train,detect,score,verify}``.

Settings resolve as command-line flag, then ``--config`` JSON document, then
built-in default. Exit codes: 0 success, 1 usage, 2 data error, 3 numerical
failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import audio, corpus, detector, evaluator, trainer, verify
from .corpus import EpisodeSpec, PatchPool
from .errors import DataError, ProtoSEDError, UsageError
from .objective import LossConfig

@dataclass
class RunConfig:
    # spectrogram
    sample_rate: int = 22050
    n_fft: int = 1024
    hop_length: int = 256
    n_mels: int = 128
    pcen_gain: float = 0.98
    pcen_bias: float = 2.0
    pcen_power: float = 0.5
    pcen_time_constant: float = 0.4
    pcen_eps: float = 1e-6
    # patches and episodes
    patch_hop: int = 8
    overlap_frac: float = 0.5
    val_frac: float = 0.2
    n_way: int = 10
    k_shot: int = 5
    n_query: int = 5
    # training
    kind: str = "logistic"
    out_dim: int = 256
    member_dims: list = field(default_factory=lambda: [256, 1024])
    kernel: str = "euclidean"
    gamma: float | None = None
    epochs: int | None = None  # 15, or 30 with the separation loss
    lr: float = 1e-4
    episodes_per_epoch: int | None = None
    val_episodes: int = 100
    separation: bool = False
    lam: float = 0.1
    delta_v: float = 10.0
    seed: int = 0
    # detection and scoring
    prob_threshold: float = 0.5
    median_filter_width: int = 1
    min_event_duration: float = 0.0
    min_iou: float = 0.3
    n_shots: int = 5
    # paths
    audio_dir: str | None = None
    cache_dir: str | None = None
    annotations: list | None = None
    checkpoint: str | None = None
    report: str | None = None
    output: str | None = None
    predictions: str | None = None
    ground_truth: str | None = None
    jobs: int = 1

    def spectrogram(self) -> audio.SpectrogramConfig:
        return audio.SpectrogramConfig(
            self.sample_rate, self.n_fft, self.hop_length, self.n_mels,
            self.pcen_gain, self.pcen_bias, self.pcen_power, self.pcen_time_constant, self.pcen_eps,
        )

    def episode_spec(self) -> EpisodeSpec:
        return EpisodeSpec(self.n_way, self.k_shot, self.n_query)

    def train_config(self) -> trainer.TrainConfig:
        epochs = self.epochs if self.epochs is not None else (30 if self.separation else 15)
        return trainer.TrainConfig(
            kind=self.kind, out_dim=self.out_dim, kernel=self.kernel, gamma=self.gamma,
            epochs=epochs, lr=self.lr, episode_spec=self.episode_spec(),
            episodes_per_epoch=self.episodes_per_epoch, val_episodes=self.val_episodes,
            loss=LossConfig(self.separation, self.lam, self.delta_v), seed=self.seed,
        )

    def detection(self) -> detector.DetectionConfig:
        return detector.DetectionConfig(
            self.prob_threshold, self.patch_hop, self.median_filter_width, self.min_event_duration
        )


_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return v


def _add(p, *flags, **kw):
    kw.setdefault("default", None)
    p.add_argument(*flags, **kw)


def _spectrogram_flags(p):
    _add(p, "--sample-rate", type=int)
    _add(p, "--n-fft", type=int)
    _add(p, "--hop-length", type=int)
    _add(p, "--n-mels", type=int)
    _add(p, "--pcen-gain", type=float)
    _add(p, "--pcen-bias", type=float)
    _add(p, "--pcen-power", type=float)
    _add(p, "--pcen-time-constant", type=float)
    _add(p, "--pcen-eps", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="protosed", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        _add(p, "--config", help="JSON document of settings (overridden by flags)")
        _add(p, "--seed", type=int)
        return p

    p = command("extract", "compute PCEN-mel feature files for every WAV in a directory")
    _add(p, "--audio-dir", dest="audio_dir")
    _add(p, "--cache-dir", dest="cache_dir")
    _add(p, "--jobs", type=int)
    _spectrogram_flags(p)

    p = command("train", "train an embedding model on labelled patches")
    _add(p, "--cache-dir")
    _add(p, "--annotations", nargs="+", help="annotation CSV files or directories of them")
    _add(p, "--checkpoint")
    _add(p, "--report", help="per-epoch JSON-lines report (default: <checkpoint>.report.jsonl)")
    _add(p, "--kind", choices=["linear", "logistic", "ensemble"])
    _add(p, "--out-dim", type=int)
    _add(p, "--member-dims", type=int, nargs="+")
    _add(p, "--kernel", choices=["euclidean", "cholesky", "rbf"])
    _add(p, "--gamma", type=_positive_float)
    _add(p, "--epochs", type=int)
    _add(p, "--lr", type=float)
    _add(p, "--n-way", type=int)
    _add(p, "--k-shot", type=int)
    _add(p, "--n-query", type=int)
    _add(p, "--episodes-per-epoch", type=int)
    _add(p, "--val-episodes", type=int)
    _add(p, "--separation", action=argparse.BooleanOptionalAction)
    _add(p, "--lambda", dest="lam", type=float)
    _add(p, "--delta-v", type=float)
    _add(p, "--val-frac", type=float)
    _add(p, "--patch-hop", type=int)
    _add(p, "--overlap-frac", type=float)

    p = command("detect", "five-shot detection on target recordings")
    _add(p, "--checkpoint")
    _add(p, "--cache-dir")
    _add(p, "--annotations", nargs="+", help="per-recording CSVs providing the first five POS events")
    _add(p, "--output")
    _add(p, "--prob-threshold", type=float)
    _add(p, "--patch-hop", type=int)
    _add(p, "--median-filter-width", type=int)
    _add(p, "--min-event-duration", type=float)

    p = command("score", "score a prediction CSV against ground truth")
    _add(p, "--predictions")
    _add(p, "--ground-truth")
    _add(p, "--min-iou", type=float)
    _add(p, "--n-shots", type=int, help="leading POS events treated as support and not scored (default 5)")

    p = command("verify", "run the built-in oracle suites")
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config document must be a JSON object")
        for key, value in doc.items():
            name = key.replace("-", "_")
            name = {"lambda": "lam"}.get(name, name)
            if name not in _FIELDS:
                raise UsageError(f"unknown config key {key!r}")
            values[name] = value
    for name, value in vars(args).items():
        if name in _FIELDS and value is not None:
            values[name] = value
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise UsageError(str(exc)) from None
    if cfg.kernel == "rbf" and (cfg.gamma is None or not cfg.gamma > 0):
        raise UsageError("--kernel rbf needs --gamma > 0")
    return cfg


def _require(value, flag):
    if value in (None, [], ""):
        raise UsageError(f"missing required setting {flag}")
    return value


def _require_dir(path, flag):
    _require(path, flag)
    if not os.path.isdir(path):
        raise UsageError(f"{flag} {path!r} is not a directory")
    return path


def feature_path(cache_dir, audiofile: str) -> str:
    return os.path.join(cache_dir, Path(audiofile).stem + ".feat")


def _expand_csvs(paths) -> list[str]:
    out = []
    for p in paths:
        if os.path.isdir(p):
            out.extend(sorted(str(q) for q in Path(p).rglob("*.csv")))
        else:
            out.append(p)
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _extract_one(job):
    wav, out, spec = job
    try:
        audio.write_features(audio.extract_features(wav, spec), out)
        return wav, None
    except ProtoSEDError as exc:
        return wav, str(exc)


def cmd_extract(cfg: RunConfig) -> int:
    audio_dir = _require_dir(cfg.audio_dir, "--audio-dir")
    cache_dir = _require(cfg.cache_dir, "--cache-dir")
    wavs = sorted(str(p) for p in Path(audio_dir).rglob("*") if p.suffix.lower() == ".wav")
    if not wavs:
        raise UsageError(f"no WAV files under {audio_dir}")
    os.makedirs(cache_dir, exist_ok=True)
    spec = cfg.spectrogram()
    jobs = [(w, feature_path(cache_dir, w), spec) for w in wavs]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs) as pool:
            results = list(pool.map(_extract_one, jobs))
    else:
        results = [_extract_one(j) for j in jobs]
    failed = [(w, err) for w, err in results if err]
    for w, err in failed:
        print(f"error: {err}", file=sys.stderr)
    print(f"extracted {len(wavs) - len(failed)}/{len(wavs)} recordings into {cache_dir}")
    if len(failed) == len(wavs):
        raise DataError("every recording failed to extract")
    return 0


def load_training_pool(cfg: RunConfig) -> tuple[PatchPool, list[str]]:
    cache_dir = _require_dir(cfg.cache_dir, "--cache-dir")
    csvs = _expand_csvs(_require(cfg.annotations, "--annotations"))
    if not csvs:
        raise UsageError("no annotation CSVs found")
    rows_by_file = {}
    all_rows = []
    for path in csvs:
        rows = corpus.read_annotations(path)
        all_rows.extend(rows)
        for name, group in corpus.group_by_file(rows).items():
            rows_by_file.setdefault(name, []).extend(group)
    names = corpus.class_names(all_rows)
    if not names:
        raise DataError("annotations contain no POS events")
    class_ids = {n: i + 1 for i, n in enumerate(names)}
    pools = []
    for audiofile in sorted(rows_by_file):
        gram = audio.read_features(feature_path(cache_dir, audiofile))
        pools.append(corpus.label_gram(gram, rows_by_file[audiofile], class_ids, cfg.patch_hop, cfg.overlap_frac, audiofile))
    return PatchPool.concat(pools), ["background"] + names


def _trend(losses) -> str:
    diffs = np.diff(losses)
    if len(diffs) == 0 or np.all(diffs <= 0):
        kind = "monotone non-increasing"
    elif np.all(np.abs(diffs) <= 1e-12):
        kind = "flat"
    else:
        kind = "non-monotone"
    return f"loss {losses[0]:.5f} -> {losses[-1]:.5f} ({kind})"


def cmd_train(cfg: RunConfig) -> int:
    checkpoint = _require(cfg.checkpoint, "--checkpoint")
    report_path = cfg.report or f"{checkpoint}.report.jsonl"
    pool, names = load_training_pool(cfg)
    counts = pool.counts()
    print("patches per class: " + ", ".join(f"{names[c]}={n}" for c, n in counts.items()))

    tcfg = cfg.train_config()
    need = tcfg.episode_spec.per_class
    short = [names[c] for c, n in counts.items() if n < need]
    if len(counts) - len(short) < tcfg.episode_spec.n_way:
        raise corpus.EpisodeError(
            f"{tcfg.episode_spec.n_way}-way episodes need {tcfg.episode_spec.n_way} classes with >= {need} "
            f"patches; {len(counts) - len(short)} qualify" + (f"; too few patches: {', '.join(short)}" if short else "")
        )
    train_pool, val_pool = corpus.split_train_val(pool, cfg.val_frac, trainer.child_rng(cfg.seed, "split"))
    train_pool = corpus.balance_oversample(train_pool, trainer.child_rng(cfg.seed, "oversample"))

    if cfg.kind == "ensemble":
        model, reports = trainer.train_ensemble(train_pool, val_pool, tcfg, tuple(cfg.member_dims))
        trainer.save_checkpoint(model, None, checkpoint)
        lines = []
        for i, rep in enumerate(reports):
            for r in rep.epochs:
                doc = json.loads(r.to_json())
                doc["member"] = i
                lines.append(json.dumps(doc, sort_keys=True) + "\n")
        text = "".join(lines)
        for i, rep in enumerate(reports):
            print(f"member {i}: {_trend([r.mean_loss for r in rep.epochs])}, "
                  f"val accuracy {rep.final_val_accuracy:.4f}")
    else:
        model, kernel, rep = trainer.train(train_pool, val_pool, tcfg)
        trainer.save_checkpoint(model, kernel, checkpoint)
        text = rep.to_jsonl()
        print(f"{_trend([r.mean_loss for r in rep.epochs])}, val accuracy {rep.final_val_accuracy:.4f}")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(text)
    print(f"wrote {checkpoint} and {report_path}")
    return 0


def cmd_detect(cfg: RunConfig) -> int:
    ckpt = _require(cfg.checkpoint, "--checkpoint")
    if not os.path.exists(ckpt):
        raise DataError(f"checkpoint not found: {ckpt}")
    cache_dir = _require_dir(cfg.cache_dir, "--cache-dir")
    output = _require(cfg.output, "--output")
    model, kernel = trainer.load_checkpoint(ckpt)
    dcfg = cfg.detection()
    out_rows = []
    for path in _expand_csvs(_require(cfg.annotations, "--annotations")):
        for audiofile, rows in sorted(corpus.group_by_file(corpus.read_annotations(path)).items()):
            gram = audio.read_features(feature_path(cache_dir, audiofile))
            events = detector.detect(model, kernel, gram, rows, dcfg)
            out_rows.extend((audiofile, ev) for ev in events)
            print(f"{audiofile}: {len(events)} events")
    with open(output, "w", newline="", encoding="utf-8") as fh:
        fh.write(detector.predictions_csv(out_rows))
    return 0


def cmd_score(cfg: RunConfig) -> int:
    report = evaluator.score_file(
        _require(cfg.predictions, "--predictions"),
        _require(cfg.ground_truth, "--ground-truth"),
        cfg.min_iou, cfg.n_shots,
    )
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_verify(cfg: RunConfig | None = None, gradient_fn=None) -> int:
    kwargs = {"gradient_fn": gradient_fn} if gradient_fn else {}
    results = verify.run_all(**kwargs)
    print(verify.format_table(results))
    return 0 if all(r.passed for r in results) else 3


COMMANDS = {
    "extract": cmd_extract,
    "train": cmd_train,
    "detect": cmd_detect,
    "score": cmd_score,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except ProtoSEDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return UsageError.exit_code


if __name__ == "__main__":
    sys.exit(main())
