"""Synthetic field recordings with planted tonal calls, for tests and demos."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

SR = 22050

TRAIN_CLASSES = {"tone_low": 700.0, "tone_mid": 1900.0, "tone_high": 4700.0}
TARGET_FREQ = 3100.0  # unseen during training


@dataclass(frozen=True)
class PlantedEvent:
    start: float
    end: float
    freq: float
    label: str


def render(duration: float, events, rng: np.random.Generator, noise_level: float = 0.02, sr: int = SR) -> np.ndarray:
    """White noise plus a harmonic tone with a raised-cosine envelope per event."""
    n = int(round(duration * sr))
    x = noise_level * rng.standard_normal(n)
    for ev in events:
        i0, i1 = int(round(ev.start * sr)), min(n, int(round(ev.end * sr)))
        t = np.arange(i1 - i0) / sr
        env = np.sqrt(np.clip(np.sin(np.pi * np.arange(i1 - i0) / max(1, i1 - i0 - 1)), 0.0, None))
        phase = rng.uniform(0, 2 * np.pi)
        tone = np.sin(2 * np.pi * ev.freq * t + phase) + 0.3 * np.sin(4 * np.pi * ev.freq * t + phase)
        x[i0:i1] += 0.25 * env * tone
    return np.clip(x, -1.0, 1.0)


def schedule(duration: float, labels_freqs, n_each: int, rng: np.random.Generator,
             min_len: float = 0.3, max_len: float = 0.8, min_gap: float = 0.6,
             t_start: float = 1.0) -> list[PlantedEvent]:
    """Non-overlapping events in random order, separated by at least ``min_gap``."""
    todo = [(lab, f) for lab, f in labels_freqs for _ in range(n_each)]
    rng.shuffle(todo)
    lengths = rng.uniform(min_len, max_len, size=len(todo))
    slack = duration - t_start - 1.0 - lengths.sum() - min_gap * len(todo)
    if slack < 0:
        raise ValueError("too many events for the requested duration")
    gaps = rng.dirichlet(np.ones(len(todo) + 1)) * slack
    events, t = [], t_start
    for (lab, f), length, gap in zip(todo, lengths, gaps):
        t += gap + min_gap
        events.append(PlantedEvent(round(t, 4), round(t + length, 4), f, lab))
        t += length
    return events


def write_wav(path, x: np.ndarray, sr: int = SR) -> None:
    wavfile.write(path, sr, np.round(x * 32767).astype(np.int16))


def write_train_csv(path, audiofile: str, events, classes) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["Audiofilename", "Starttime", "Endtime", *classes])
        for ev in events:
            w.writerow([audiofile, f"{ev.start:.4f}", f"{ev.end:.4f}",
                        *("POS" if c == ev.label else "NEG" for c in classes)])


def write_eval_csv(path, audiofile: str, events) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["Audiofilename", "Starttime", "Endtime", "Q"])
        for ev in events:
            w.writerow([audiofile, f"{ev.start:.4f}", f"{ev.end:.4f}", "POS"])


def make_corpus(out_dir, seed: int = 0, duration: float = 600.0, n_train_events: int = 60,
                n_target_events: int = 40, n_distractors: int = 20) -> dict:
    """Write one training and one held-out recording with annotations.

    The training file holds the three training tone classes; the held-out file
    holds a fourth, unseen tone (the target) plus unannotated distractors.
    Returns the paths and planted events.
    """
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    classes = sorted(TRAIN_CLASSES)

    train_events = schedule(duration, [(c, TRAIN_CLASSES[c]) for c in classes], n_train_events, rng)
    train_wav = os.path.join(out_dir, "train_a.wav")
    write_wav(train_wav, render(duration, train_events, rng))
    train_csv = os.path.join(out_dir, "train_a.csv")
    write_train_csv(train_csv, "train_a.wav", train_events, classes)

    mixed = schedule(duration, [("target", TARGET_FREQ)], n_target_events, rng)
    distract = schedule(duration, [("tone_low", TRAIN_CLASSES["tone_low"])], n_distractors, rng, min_gap=0.6)
    taken = [(e.start - 0.3, e.end + 0.3) for e in mixed]
    distract = [d for d in distract if not any(d.start < b and a < d.end for a, b in taken)]
    eval_wav = os.path.join(out_dir, "eval_a.wav")
    write_wav(eval_wav, render(duration, mixed + distract, rng))
    eval_csv = os.path.join(out_dir, "eval_a.csv")
    write_eval_csv(eval_csv, "eval_a.wav", mixed)

    return {
        "train_wav": train_wav, "train_csv": train_csv, "train_events": train_events,
        "eval_wav": eval_wav, "eval_csv": eval_csv, "eval_events": mixed, "distractors": distract,
    }
