"""Plain-text instance and trajectory formats.

Instance files are JSON documents::

    {
      "num_states": 2, "num_actions": 2, "gamma": 0.9,
      "transitions": [[[...S...], ...S rows...], ...one block per action...],
      "rewards": [[...A...], ...S rows...],
      "features": [[...d...], ...S*A rows, row s*A + a...],     (optional)
      "behavior_policy": [[...A...], ...S rows...],             (optional)
      "target_policy": [[...A...], ...S rows...],               (optional)
      "gamma_c": 0.5, "name": "...", "notes": "..."             (optional)
    }

Row-level problems are reported with the 1-based line number of the offending
row so that hand-edited files can be fixed quickly.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .mdp import STOCHASTIC_TOL, BehaviorPolicy, FeatureMap, Mdp
from .sampler import Trajectory

_NUMBER = re.compile(r"-?(?:0|[1-9]\d*)(?:\.\d+)?(?:[eE][-+]?\d+)?")
_WS = re.compile(r"\s*")
_decoder = json.JSONDecoder()


def _locate(text: str) -> dict[tuple, int]:
    """Map every JSON path (tuple of keys/indices) to its starting offset."""
    spans: dict[tuple, int] = {}

    def skip(pos):
        return _WS.match(text, pos).end()

    def value(pos, path):
        pos = skip(pos)
        spans[path] = pos
        ch = text[pos : pos + 1]
        if ch == "[":
            pos = skip(pos + 1)
            if text[pos] == "]":
                return pos + 1
            i = 0
            while True:
                pos = skip(value(pos, path + (i,)))
                i += 1
                if text[pos] == ",":
                    pos += 1
                elif text[pos] == "]":
                    return pos + 1
                else:
                    raise ValueError(pos)
        if ch == "{":
            pos = skip(pos + 1)
            if text[pos] == "}":
                return pos + 1
            while True:
                key, pos = _decoder.raw_decode(text, skip(pos))
                pos = skip(pos)
                if text[pos] != ":":
                    raise ValueError(pos)
                pos = skip(value(pos + 1, path + (key,)))
                if text[pos] == ",":
                    pos += 1
                elif text[pos] == "}":
                    return pos + 1
                else:
                    raise ValueError(pos)
        _, end = _decoder.raw_decode(text, pos)
        return end

    value(0, ())
    return spans


@dataclass
class Instance:
    """An MDP together with the optional objects defined alongside it."""

    mdp: Mdp
    features: FeatureMap | None = None
    behavior: BehaviorPolicy | None = None
    target: np.ndarray | None = None
    gamma_c: float | None = None
    name: str = ""
    notes: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        mdp = self.mdp
        out = {
            "name": self.name,
            "num_states": mdp.num_states,
            "num_actions": mdp.num_actions,
            "gamma": mdp.discount,
            "transitions": mdp.transitions.tolist(),
            "rewards": mdp.rewards.tolist(),
        }
        if self.features is not None:
            out["features"] = self.features.matrix.tolist()
        if self.behavior is not None:
            out["behavior_policy"] = self.behavior.table.tolist()
        if self.target is not None:
            out["target_policy"] = np.asarray(self.target).tolist()
        if self.gamma_c is not None:
            out["gamma_c"] = self.gamma_c
        if self.notes:
            out["notes"] = self.notes
        return out

    def content_hash(self) -> str:
        """Git-style blob hash of the canonical JSON encoding."""
        body = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def _line(text: str, spans: dict, path: tuple) -> int:
    return text.count("\n", 0, spans.get(path, 0)) + 1


def parse_instance(text: str, source: str = "<string>") -> Instance:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{source}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{source}:1: top level must be an object")
    spans = _locate(text)

    def fail(path, msg):
        raise ConfigurationError(f"{source}:{_line(text, spans, path)}: {msg}")

    for key in ("num_states", "num_actions", "gamma", "transitions", "rewards"):
        if key not in doc:
            fail((), f"missing required key '{key}'")
    S, A = doc["num_states"], doc["num_actions"]
    if not (isinstance(S, int) and S >= 1):
        fail(("num_states",), "num_states must be a positive integer")
    if not (isinstance(A, int) and A >= 1):
        fail(("num_actions",), "num_actions must be a positive integer")

    def table(key, shape):
        raw = doc[key]
        try:
            arr = np.asarray(raw, dtype=float)
        except (TypeError, ValueError):
            fail((key,), f"'{key}' must be a rectangular array of numbers")
        if arr.shape != shape:
            fail((key,), f"'{key}' must have shape {shape}, got {arr.shape}")
        return arr

    def stochastic_rows(key, arr, prefix=()):
        for idx in np.ndindex(arr.shape[:-1]):
            row = arr[idx]
            path = (key,) + prefix + tuple(int(i) for i in idx)
            if np.any(row < 0):
                fail(path, f"{key}{list(idx)} has a negative probability")
            if abs(row.sum() - 1.0) > STOCHASTIC_TOL:
                fail(path, f"{key}{list(idx)} sums to {row.sum()!r}, not 1")

    P = table("transitions", (A, S, S))
    stochastic_rows("transitions", P)
    R = table("rewards", (S, A))
    for s in range(S):
        if np.any(np.abs(R[s]) > 1.0):
            fail(("rewards", s), f"rewards[{s}] has an entry with |R| > 1")
    gamma = doc["gamma"]
    if not isinstance(gamma, (int, float)) or not 0 < gamma < 1:
        fail(("gamma",), "gamma must lie in (0, 1)")
    mdp = Mdp(P, R, float(gamma))

    features = behavior = target = None
    if "features" in doc:
        Phi = np.asarray(doc["features"], dtype=float)
        if Phi.ndim != 2 or Phi.shape[0] != S * A:
            fail(("features",), f"features must have {S * A} rows")
        for r in range(Phi.shape[0]):
            if np.abs(Phi[r]).sum() > 1.0 + STOCHASTIC_TOL:
                fail(("features", r), f"features[{r}] has L1 norm above 1")
        features = FeatureMap(Phi)
    if "behavior_policy" in doc:
        B = table("behavior_policy", (S, A))
        stochastic_rows("behavior_policy", B)
        for s in range(S):
            if np.any(B[s] <= 0):
                fail(("behavior_policy", s), f"behavior_policy[{s}] must be strictly positive")
        behavior = BehaviorPolicy(B)
    if "target_policy" in doc:
        target = table("target_policy", (S, A))
        stochastic_rows("target_policy", target)
    gamma_c = doc.get("gamma_c")
    if gamma_c is not None and not 0 < gamma_c < 1:
        fail(("gamma_c",), "gamma_c must lie in (0, 1)")
    known = {
        "num_states", "num_actions", "gamma", "transitions", "rewards", "features",
        "behavior_policy", "target_policy", "gamma_c", "name", "notes",
    }
    return Instance(
        mdp=mdp,
        features=features,
        behavior=behavior,
        target=target,
        gamma_c=gamma_c,
        name=str(doc.get("name", "")),
        notes=str(doc.get("notes", "")),
        extra={k: v for k, v in doc.items() if k not in known},
    )


def load_instance(path) -> Instance:
    path = Path(path)
    return parse_instance(path.read_text(), source=str(path))


def dump_instance(instance: Instance, path) -> None:
    Path(path).write_text(json.dumps(instance.to_dict(), indent=1) + "\n")


def dump_trajectory(traj, path) -> None:
    """One ``state action`` pair per line after a two-line header."""
    lines = [f"# seed {traj.seed}", f"# start {traj.start_state}"]
    lines += [f"{s} {a}" for s, a in zip(traj.states.tolist(), traj.actions.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def load_trajectory(path):
    seed = start = None
    states, actions = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "seed":
                seed = int(parts[1])
            elif len(parts) == 2 and parts[0] == "start":
                start = int(parts[1])
            continue
        parts = line.split()
        if len(parts) != 2 or not all(_NUMBER.fullmatch(p) for p in parts):
            raise ConfigurationError(f"{path}:{lineno}: expected 'state action'")
        states.append(int(parts[0]))
        actions.append(int(parts[1]))
    if seed is None or start is None:
        raise ConfigurationError(f"{path}: missing seed/start header")
    return Trajectory(np.array(states, dtype=np.int64), np.array(actions, dtype=np.int64), seed, start)
