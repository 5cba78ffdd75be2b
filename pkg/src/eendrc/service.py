"""FastAPI service wrapping the core package.

Endpoints cover the multi-client surfaces: diarization of uploaded or
server-local WAVs, RTTM scoring, and mixture simulation. The model is
loaded once at startup (or later via POST /model/load) and shared across
requests; package errors map to HTTP 400 with their kind prefix.
"""

from __future__ import annotations

import base64
import binascii
import io
import os
import tempfile

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .datasim import (
    MixtureRecipe,
    SyntheticVoiceCorpus,
    overlap_ratio,
    simulate_mixture,
)
from .errors import DiarizationError, InvalidInputError
from .features import read_wav, write_wav
from .pipeline import INFERENCE_MODES, infer_recording, load_checkpoint
from .scoring import der, format_rttm, parse_rttm

__all__ = ["create_app"]


class DiarizeRequest(BaseModel):
    wav_path: str | None = Field(default=None, description="Server-local WAV path")
    wav_base64: str | None = Field(default=None, description="Base64 WAV bytes")
    mode: str = "eda-rc"
    beam: int = 3
    threshold: float = 0.5
    ref_rttm: str | None = Field(
        default=None, description="Reference RTTM text (oracle mode)"
    )


class DiarizeResponse(BaseModel):
    rttm: str
    num_speakers: int
    num_frames: int
    frame_shift_s: float
    mode: str


class ScoreRequest(BaseModel):
    ref_rttm: str
    hyp_rttm: str
    collar_s: float = 0.25


class ScoreResponse(BaseModel):
    miss_s: float
    false_alarm_s: float
    speaker_confusion_s: float
    scored_speech_s: float
    der_pct: float


class SimulateRequest(BaseModel):
    n_speakers: int
    seed: int = 0
    mean_silence_s: float = 2.0
    synthetic_speakers: int = 24


class SimulateResponse(BaseModel):
    wav_base64: str
    rttm: str
    overlap_pct: float
    duration_s: float


class LoadModelRequest(BaseModel):
    path: str


def _decode_wave(req: DiarizeRequest):
    if (req.wav_path is None) == (req.wav_base64 is None):
        raise InvalidInputError("provide exactly one of wav_path or wav_base64")
    if req.wav_path is not None:
        if not os.path.exists(req.wav_path):
            raise InvalidInputError(f"no such file: {req.wav_path}")
        return read_wav(req.wav_path)
    try:
        blob = base64.b64decode(req.wav_base64, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise InvalidInputError(f"wav_base64 is not valid base64: {exc}") from exc
    with tempfile.NamedTemporaryFile(suffix=".wav", delete=False) as fh:
        fh.write(blob)
        tmp = fh.name
    try:
        return read_wav(tmp)
    finally:
        os.unlink(tmp)


def create_app(checkpoint_path: str | None = None) -> FastAPI:
    app = FastAPI(title="eendrc", version="0.1.0")
    app.state.model = None
    app.state.model_extra = {}
    app.state.model_path = None

    def load_model(path: str) -> None:
        model, extra = load_checkpoint(path)
        app.state.model = model
        app.state.model_extra = extra
        app.state.model_path = path

    if checkpoint_path is not None:
        load_model(checkpoint_path)

    @app.exception_handler(DiarizationError)
    async def on_package_error(request: Request, exc: DiarizationError):
        return JSONResponse(
            status_code=400, content={"detail": f"{exc.kind}: {exc}"}
        )

    @app.get("/health")
    def health():
        return {
            "status": "ok",
            "model_loaded": app.state.model is not None,
            "model_path": app.state.model_path,
        }

    @app.post("/model/load")
    def model_load(req: LoadModelRequest):
        load_model(req.path)
        return {"model_path": app.state.model_path}

    @app.post("/diarize", response_model=DiarizeResponse)
    def diarize(req: DiarizeRequest):
        if app.state.model is None:
            return JSONResponse(
                status_code=409,
                content={"detail": "no model loaded; POST /model/load first"},
            )
        if req.mode not in INFERENCE_MODES:
            raise InvalidInputError(
                f"unknown mode {req.mode!r}; choose one of "
                f"{', '.join(INFERENCE_MODES)}"
            )
        wave = _decode_wave(req)
        ref = parse_rttm(req.ref_rttm) if req.ref_rttm else None
        hyp = infer_recording(
            app.state.model,
            wave,
            mode=req.mode,
            beam_width=req.beam,
            ref_segments=ref,
            n_train_speakers=int(app.state.model_extra.get("n_train_speakers", 3)),
        )
        return DiarizeResponse(
            rttm=format_rttm(hyp.to_segments(req.threshold)),
            num_speakers=hyp.num_speakers,
            num_frames=hyp.num_frames,
            frame_shift_s=hyp.frame_shift_s,
            mode=req.mode,
        )

    @app.post("/score", response_model=ScoreResponse)
    def score(req: ScoreRequest):
        result = der(parse_rttm(req.ref_rttm), parse_rttm(req.hyp_rttm), req.collar_s)
        return ScoreResponse(
            miss_s=result.miss_s,
            false_alarm_s=result.false_alarm_s,
            speaker_confusion_s=result.speaker_confusion_s,
            scored_speech_s=result.scored_speech_s,
            der_pct=result.der,
        )

    @app.post("/simulate", response_model=SimulateResponse)
    def simulate(req: SimulateRequest):
        corpus = SyntheticVoiceCorpus(num_speakers=req.synthetic_speakers)
        recipe = MixtureRecipe(
            n_speakers=req.n_speakers,
            mean_silence_s=req.mean_silence_s,
            seed=req.seed,
        )
        wave, segments = simulate_mixture(corpus, recipe)
        buffer = io.BytesIO()
        _write_wav_bytes(buffer, wave)
        return SimulateResponse(
            wav_base64=base64.b64encode(buffer.getvalue()).decode(),
            rttm=format_rttm(segments),
            overlap_pct=overlap_ratio(segments),
            duration_s=wave.duration_s,
        )

    return app


def _write_wav_bytes(buffer: io.BytesIO, wave) -> None:
    with tempfile.NamedTemporaryFile(suffix=".wav", delete=False) as fh:
        tmp = fh.name
    try:
        write_wav(tmp, wave)
        with open(tmp, "rb") as fh:
            buffer.write(fh.read())
    finally:
        os.unlink(tmp)
