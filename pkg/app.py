"""
QuantumLeak Lab - FastAPI Oracle

This module exposes a victim deployment over HTTP with the same query contract
as the NDJSON server in oracle.py:
1. POST /query answers {"id", "features"} with {"id", "raw"}
2. POST /query/batch answers a list of feature vectors in one call
3. POST /clock advances the virtual clock between query rounds
"""

import os
from typing import Optional

from dotenv import load_dotenv
from fastapi import FastAPI, HTTPException

from noise_model import NoiseClock, load_noise_profile, noise_preset
from oracle import (
    BatchQueryRequest,
    BatchQueryResponse,
    ClockRequest,
    ClockResponse,
    ProtocolError,
    QueryRequest,
    QueryResponse,
    VictimDeployment,
    advance_clock,
    serve_batch,
    serve_query,
)
from qnn_model import load_checkpoint

# Load environment variables from .env file
load_dotenv()

VICTIM_CHECKPOINT = os.environ.get("QLEAK_VICTIM_CHECKPOINT", "")
NOISE_PRESET = os.environ.get("QLEAK_NOISE_PRESET", "auckland")
NOISE_SEED = int(os.environ.get("QLEAK_NOISE_SEED", "0"))
SHOTS = os.environ.get("QLEAK_SHOTS", "")

# Debug logging for environment variables (only in development)
if os.environ.get("ENVIRONMENT") != "production":
    print(f"Environment: {os.environ.get('ENVIRONMENT', 'development')}")
    print(f"QLEAK_VICTIM_CHECKPOINT: {VICTIM_CHECKPOINT or '(not set)'}")
    print(f"QLEAK_NOISE_PRESET: {NOISE_PRESET}")

app = FastAPI(title="QuantumLeak Oracle")

deployment: Optional[VictimDeployment] = None


def configure(dep: VictimDeployment) -> None:
    """Install the deployment served by this app."""
    global deployment
    deployment = dep


def deployment_from_env() -> VictimDeployment:
    """Build a deployment from QLEAK_VICTIM_CHECKPOINT, QLEAK_NOISE_PRESET and QLEAK_SHOTS."""
    if not VICTIM_CHECKPOINT:
        raise ValueError("QLEAK_VICTIM_CHECKPOINT is not set")
    model, _ = load_checkpoint(VICTIM_CHECKPOINT)
    if os.path.exists(NOISE_PRESET):
        profile = load_noise_profile(NOISE_PRESET)
    else:
        profile = noise_preset(NOISE_PRESET, NOISE_SEED)
    shots = int(SHOTS) if SHOTS else None
    return VictimDeployment(model, profile, NoiseClock(), shots, seed=NOISE_SEED)


def get_deployment() -> VictimDeployment:
    global deployment
    if deployment is None:
        try:
            deployment = deployment_from_env()
            print(f"✅ Loaded victim from {VICTIM_CHECKPOINT} with noise '{deployment.profile.name}'")
        except (OSError, ValueError) as e:
            print(f"❌ Could not load victim deployment: {e}")
            raise HTTPException(status_code=503, detail=f"No victim deployed: {e}")
    return deployment


@app.get("/")
async def root():
    """Root endpoint returning API status"""
    return {"status": "active", "message": "QuantumLeak oracle is running"}


@app.get("/health")
async def health():
    """Liveness check; reports the virtual clock but nothing about the model."""
    dep = get_deployment()
    return {"status": "ok", "t": dep.clock.t}


@app.post("/query", response_model=QueryResponse)
async def query(req: QueryRequest):
    """Answer one query at the current virtual time."""
    dep = get_deployment()
    try:
        raw = serve_query(dep, req.features)
    except ProtocolError as e:
        raise HTTPException(status_code=400, detail=str(e))
    return QueryResponse(id=req.id, raw=[float(v) for v in raw])


@app.post("/query/batch", response_model=BatchQueryResponse)
async def query_batch(req: BatchQueryRequest):
    """Answer a batch of queries at the current virtual time."""
    dep = get_deployment()
    try:
        if not req.features:
            raise ProtocolError("features must contain at least one vector")
        raw = serve_batch(dep, req.features)
    except ProtocolError as e:
        raise HTTPException(status_code=400, detail=str(e))
    return BatchQueryResponse(id=req.id, raw=[[float(v) for v in row] for row in raw])


@app.post("/clock", response_model=ClockResponse)
async def clock(req: ClockRequest):
    """Wait until the requested virtual time."""
    dep = get_deployment()
    try:
        t = advance_clock(dep, req.wait_until)
    except ProtocolError as e:
        raise HTTPException(status_code=400, detail=str(e))
    return ClockResponse(id=req.id, t=t)


if __name__ == "__main__":
    import uvicorn
    print("🚀 Starting QuantumLeak Oracle Server...")
    uvicorn.run(app, host=os.environ.get("QLEAK_ORACLE_HOST", "0.0.0.0"),
                port=int(os.environ.get("QLEAK_ORACLE_PORT", "8000")))
