"""
QuantumLeak Lab - Oracle Module

This module simulates a QNN-as-a-service deployment of the victim model. The
deployment runs the frozen victim on a drifting noisy device, keeps a virtual
clock and counts every query. It is reachable in-process, over newline-delimited
JSON on stdio or a TCP socket, and over HTTP (see app.py). Attacks talk to it
only through the client classes defined here.
"""

import json
import socket
import sys
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, TextIO, Union

import numpy as np
import pandas as pd
import requests
from pydantic import BaseModel, ValidationError

from noise_model import NoiseClock, NoiseProfile, noise_preset
from qnn_model import CompiledCircuit, QnnModel, amplitude_encode_batch
from quantum_sim import sample_counts

FEATURE_LENGTH = 8
HOURS_PER_DAY = 24.0
DEFAULT_SHOTS = 4096


class ProtocolError(ValueError):
    """Malformed request to the oracle."""


# ---------------------------------------------------------------------------
# Deployment
# ---------------------------------------------------------------------------

@dataclass
class VictimDeployment:
    """
    A deployed victim model.

    shots=None serves exact probabilities; an integer serves shot-sampled
    frequencies. The model is never modified and never exposed to clients.
    """
    model: QnnModel
    profile: NoiseProfile = field(default_factory=lambda: noise_preset("none"))
    clock: NoiseClock = field(default_factory=NoiseClock)
    shots: Optional[int] = None
    query_counter: int = 0
    seed: int = 0
    _channels: Dict[float, CompiledCircuit] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.shots is not None and self.shots < 1:
            raise ValueError(f"shots must be positive, got {self.shots}")

    def channel(self, t: float) -> CompiledCircuit:
        if t not in self._channels:
            if len(self._channels) > 16:
                self._channels.clear()
            self._channels[t] = CompiledCircuit(self.model.circuit(), (self.profile, t), cache_products=False)
        return self._channels[t]


def _check_features(features) -> np.ndarray:
    try:
        x = np.asarray(features, dtype=float)
    except (TypeError, ValueError) as e:
        raise ProtocolError(f"features must be numbers: {e}") from e
    if x.ndim != 1 or x.shape[0] != FEATURE_LENGTH:
        raise ProtocolError(f"features must be a list of {FEATURE_LENGTH} numbers, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ProtocolError("features must be finite")
    if not np.any(x):
        raise ProtocolError("features must not be all zero")
    return x


def _respond(dep: VictimDeployment, x: np.ndarray, first_index: int) -> np.ndarray:
    states = amplitude_encode_batch(x, dep.model.n_qubits)
    probs = dep.channel(dep.clock.t).probs(states, dep.model.readout_qubits)
    if dep.shots is None:
        return probs
    out = np.empty_like(probs)
    for row in range(probs.shape[0]):
        entropy = np.random.SeedSequence([dep.seed, first_index + row]).generate_state(1)[0]
        p = np.clip(probs[row], 0.0, None)
        out[row] = sample_counts(p / p.sum(), dep.shots, int(entropy)) / dep.shots
    return out


def serve_query(dep: VictimDeployment, features) -> np.ndarray:
    """
    Answer one query at the deployment's current virtual time.

    Returns:
        Raw probability vector over the readout qubits

    Raises:
        ProtocolError: on a malformed feature vector (the query is still counted)
    """
    index = dep.query_counter
    dep.query_counter += 1
    x = _check_features(features)
    return _respond(dep, x[None, :], index)[0]


def serve_batch(dep: VictimDeployment, features: np.ndarray) -> np.ndarray:
    """Answer a batch of queries; equivalent to serve_query row by row."""
    batch = list(np.atleast_2d(features)) if isinstance(features, np.ndarray) else list(features)
    index = dep.query_counter
    dep.query_counter += len(batch)
    rows = [_check_features(row) for row in batch]
    return _respond(dep, np.stack(rows), index)


# ---------------------------------------------------------------------------
# Query datasets
# ---------------------------------------------------------------------------

@dataclass
class QueryDataset:
    """Pooled oracle responses D = {S, Q_V(S)} with their time and round tags."""
    features: np.ndarray
    raw: np.ndarray
    t: np.ndarray
    round: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    @property
    def labels(self) -> np.ndarray:
        """Oracle labels: argmax of each raw vector, lowest index on ties."""
        return np.argmax(self.raw, axis=1)

    def subset(self, idx) -> "QueryDataset":
        idx = np.asarray(idx, dtype=int)
        return QueryDataset(self.features[idx], self.raw[idx], self.t[idx], self.round[idx])

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.features, columns=[f"f{i}" for i in range(self.features.shape[1])])
        for k in range(self.raw.shape[1]):
            df[f"raw{k}"] = self.raw[:, k]
        df["t"] = self.t
        df["round"] = self.round
        return df

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "QueryDataset":
        f_cols = sorted((c for c in df.columns if c.startswith("f") and c[1:].isdigit()), key=lambda c: int(c[1:]))
        r_cols = sorted((c for c in df.columns if c.startswith("raw")), key=lambda c: int(c[3:]))
        return cls(
            df[f_cols].to_numpy(dtype=float),
            df[r_cols].to_numpy(dtype=float),
            df["t"].to_numpy(dtype=float),
            df["round"].to_numpy(dtype=int),
        )

    @classmethod
    def concat(cls, parts: List["QueryDataset"]) -> "QueryDataset":
        return cls(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.raw for p in parts]),
            np.concatenate([p.t for p in parts]),
            np.concatenate([p.round for p in parts]),
        )


# ---------------------------------------------------------------------------
# Clients
# ---------------------------------------------------------------------------

class InProcessOracle:
    """Direct calls into a deployment; used by tests and single-process runs."""

    def __init__(self, deployment: VictimDeployment):
        self.deployment = deployment
        self.queries = 0

    def query(self, features: np.ndarray) -> np.ndarray:
        raw = serve_batch(self.deployment, features)
        self.queries += len(raw)
        return raw

    def wait_until(self, t: float) -> float:
        clock = self.deployment.clock
        return clock.advance_to(max(clock.t, float(t)))

    def close(self):
        pass


class SocketOracle:
    """NDJSON client for `deploy-oracle --mode socket`."""

    def __init__(self, host: str, port: int, timeout: float = 60.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.reader = self.sock.makefile("r", encoding="utf-8")
        self.next_id = 0
        self.queries = 0

    def _call(self, payload: dict) -> dict:
        payload = {"id": self.next_id, **payload}
        self.next_id += 1
        self.sock.sendall((json.dumps(payload) + "\n").encode("utf-8"))
        line = self.reader.readline()
        if not line:
            raise ConnectionError("Oracle closed the connection")
        reply = json.loads(line)
        if "error" in reply:
            raise ProtocolError(f"Oracle error for request {reply.get('id')}: {reply['error']}")
        return reply

    def query(self, features: np.ndarray) -> np.ndarray:
        out = []
        for row in np.atleast_2d(features):
            out.append(self._call({"features": [float(v) for v in row]})["raw"])
            self.queries += 1
        return np.array(out, dtype=float)

    def wait_until(self, t: float) -> float:
        return float(self._call({"wait_until": float(t)})["t"])

    def close(self):
        self.reader.close()
        self.sock.close()


class HttpOracle:
    """Client for the FastAPI deployment in app.py."""

    def __init__(self, base_url: str, timeout: float = 60.0, max_retries: int = 3, base_delay: float = 0.5):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.max_retries = max_retries
        self.base_delay = base_delay
        self.next_id = 0
        self.queries = 0

    def _post(self, endpoint: str, payload: dict) -> dict:
        url = f"{self.base_url}/{endpoint}"
        for attempt in range(self.max_retries):
            try:
                response = requests.post(url, json=payload, timeout=self.timeout)
                response.raise_for_status()
                return response.json()
            except requests.exceptions.HTTPError as e:
                if response.status_code == 400:
                    raise ProtocolError(f"Oracle rejected request: {response.text}") from e
                if attempt == self.max_retries - 1:
                    raise
            except (requests.exceptions.ConnectionError, requests.exceptions.Timeout):
                if attempt == self.max_retries - 1:
                    raise
            delay = self.base_delay * (2 ** attempt)
            print(f"⚠️ Oracle request failed. Retrying in {delay:.2f} seconds... (Attempt {attempt + 1}/{self.max_retries})")
            time.sleep(delay)
        raise ConnectionError(f"Failed after {self.max_retries} attempts")

    def query(self, features: np.ndarray) -> np.ndarray:
        rows = [[float(v) for v in row] for row in np.atleast_2d(features)]
        reply = self._post("query/batch", {"id": self.next_id, "features": rows})
        self.next_id += 1
        self.queries += len(rows)
        return np.array(reply["raw"], dtype=float)

    def wait_until(self, t: float) -> float:
        reply = self._post("clock", {"id": self.next_id, "wait_until": float(t)})
        self.next_id += 1
        return float(reply["t"])

    def close(self):
        pass


Oracle = Union[InProcessOracle, SocketOracle, HttpOracle]


def round_times(m: int, day_offset: float = 0.0) -> List[float]:
    """Virtual query times day_offset + r * 24/m for r = 0..m-1."""
    if m < 1:
        raise ValueError(f"Number of query rounds must be at least 1, got {m}")
    return [day_offset + r * HOURS_PER_DAY / m for r in range(m)]


def query_rounds(oracle: Oracle, samples: np.ndarray, m: int, day_offset: float = 0.0,
                 resample_pool: Optional[np.ndarray] = None, seed: int = 0,
                 done: Optional[QueryDataset] = None,
                 on_round: Optional[Callable[[QueryDataset], None]] = None) -> QueryDataset:
    """
    Query the oracle in m rounds spaced 24/m virtual hours apart.

    Args:
        oracle: Any client
        samples: Query set S of shape (n, 8), sent in every round
        m: Number of rounds
        day_offset: Hour of round 0; moved to the next day when the oracle clock
            has already passed it
        resample_pool: When given, each round draws |S| fresh rows from this pool
            instead of reusing S
        seed: Seed of the per-round draws
        done: Rounds already collected (resume); they are not queried again
        on_round: Called with each newly collected round

    Returns:
        QueryDataset of m * |S| records
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    parts = []
    finished = set()
    if done is not None and len(done):
        finished = set(int(r) for r in np.unique(done.round))
        parts.append(done)
        day_offset = float(done.t[done.round == min(finished)][0]) - min(finished) * HOURS_PER_DAY / m
    else:
        now = oracle.wait_until(0.0)
        while day_offset < now:
            day_offset += HOURS_PER_DAY

    rng = np.random.default_rng(seed)
    for r, t in enumerate(round_times(m, day_offset)):
        batch = samples
        if resample_pool is not None:
            batch = resample_pool[rng.choice(len(resample_pool), size=len(samples), replace=False)]
        if r in finished:
            continue
        actual_t = oracle.wait_until(t)
        raw = oracle.query(batch)
        part = QueryDataset(batch.copy(), raw, np.full(len(batch), actual_t), np.full(len(batch), r, dtype=int))
        parts.append(part)
        if on_round is not None:
            on_round(part)
    data = QueryDataset.concat(parts)
    order = np.argsort(data.round, kind="stable")
    return data.subset(order)


def batch_query(dep: VictimDeployment, samples: np.ndarray, m: int, day_offset: float = 0.0,
                resample_pool: Optional[np.ndarray] = None, seed: int = 0) -> QueryDataset:
    return query_rounds(InProcessOracle(dep), samples, m, day_offset, resample_pool, seed)


# ---------------------------------------------------------------------------
# Wire protocol
# ---------------------------------------------------------------------------

class QueryRequest(BaseModel):
    id: int
    features: List[float]


class BatchQueryRequest(BaseModel):
    id: int
    features: List[List[float]]


class ClockRequest(BaseModel):
    id: int
    wait_until: float


class QueryResponse(BaseModel):
    id: int
    raw: List[float]


class BatchQueryResponse(BaseModel):
    id: int
    raw: List[List[float]]


class ClockResponse(BaseModel):
    id: int
    t: float


class ErrorResponse(BaseModel):
    id: int
    error: str


def advance_clock(dep: VictimDeployment, t: float) -> float:
    """Wait until virtual time t; a time already passed returns the current time."""
    if not np.isfinite(t) or t < 0:
        raise ProtocolError(f"wait_until must be a non-negative number, got {t}")
    return dep.clock.advance_to(max(dep.clock.t, float(t)))


def handle_request(dep: VictimDeployment, line: str) -> str:
    """
    Answer one NDJSON request line with one NDJSON response line (no newline).

    Query requests {"id", "features"} get {"id", "raw"}; clock requests
    {"id", "wait_until"} get {"id", "t"}; anything else gets {"id", "error"}
    with id -1 when the request id is unreadable. Every non-clock request is
    counted as a query.
    """
    try:
        payload = json.loads(line)
    except json.JSONDecodeError as e:
        dep.query_counter += 1
        return ErrorResponse(id=-1, error=f"invalid JSON: {e.msg}").model_dump_json()
    request_id = payload.get("id") if isinstance(payload, dict) else None
    request_id = request_id if isinstance(request_id, int) and not isinstance(request_id, bool) else -1

    try:
        if isinstance(payload, dict) and "wait_until" in payload:
            req = ClockRequest.model_validate(payload)
            return ClockResponse(id=req.id, t=advance_clock(dep, req.wait_until)).model_dump_json()
        try:
            req = QueryRequest.model_validate(payload)
        except ValidationError as e:
            dep.query_counter += 1
            raise ProtocolError(_first_error(e)) from e
        raw = serve_query(dep, req.features)
        return QueryResponse(id=req.id, raw=[float(v) for v in raw]).model_dump_json()
    except ValidationError as e:
        return ErrorResponse(id=request_id, error=_first_error(e)).model_dump_json()
    except ProtocolError as e:
        return ErrorResponse(id=request_id, error=str(e)).model_dump_json()


def _first_error(e: ValidationError) -> str:
    err = e.errors()[0]
    where = ".".join(str(p) for p in err.get("loc", ())) or "request"
    return f"{where}: {err.get('msg', 'invalid')}"


def serve_stream(dep: VictimDeployment, in_stream: TextIO = sys.stdin, out_stream: TextIO = sys.stdout) -> int:
    """Serve NDJSON requests until end of input. Returns the number of lines handled."""
    handled = 0
    for line in in_stream:
        if not line.strip():
            continue
        out_stream.write(handle_request(dep, line) + "\n")
        out_stream.flush()
        handled += 1
    return handled


def _serve_connection(dep: VictimDeployment, conn: socket.socket) -> None:
    with conn, conn.makefile("r", encoding="utf-8") as reader:
        for line in reader:
            if not line.strip():
                continue
            conn.sendall((handle_request(dep, line) + "\n").encode("utf-8"))


def serve_socket(dep: VictimDeployment, host: str = "127.0.0.1", port: int = 8765,
                 max_connections: Optional[int] = None,
                 ready: Optional[Callable[[int], None]] = None) -> None:
    """
    Serve NDJSON over TCP, one connection at a time so requests stay serialized.

    Args:
        port: Port to bind; 0 picks a free port
        max_connections: Stop after this many connections (None serves forever)
        ready: Called with the bound port once the server is listening
    """
    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        server.bind((host, port))
        server.listen(8)
        bound = server.getsockname()[1]
        print(f"✅ Oracle listening on {host}:{bound}")
        if ready is not None:
            ready(bound)
        served = 0
        while max_connections is None or served < max_connections:
            conn, _ = server.accept()
            try:
                _serve_connection(dep, conn)
            except (ConnectionError, OSError) as e:
                print(f"⚠️ Connection dropped: {e}")
            served += 1
    finally:
        server.close()
