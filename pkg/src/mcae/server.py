"""Embedded HTTP JSON API over an annotation session: cluster queue,
decisions, thumbnails, progress, and sparse export.

State is a pure function of the decision log; a restart replays the log and
serves identical responses. Writes are serialized by a lock and durably
appended before the response is sent.
"""
from __future__ import annotations

import hashlib
import io
import threading
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from PIL import Image
from scipy import ndimage

from .annotation import (
    ClusterDecision,
    SessionStore,
    VERDICT_LABELED,
    VERDICT_REJECTED,
    open_session,
)
from .errors import (
    DataError,
    InvalidClassError,
    NonMemberExclusionError,
    UnknownClusterError,
)
from .raster import TileGrid, global_frame

_CONTOUR_COLOR = (255, 255, 0)


class SessionState:
    """Mutable server-side session: store + derived queue + caches."""

    def __init__(self, session_dir: Path):
        self.store: SessionStore
        self.grid: TileGrid
        self.store, self.grid, manifest = open_session(session_dir)
        self.session_dir = session_dir
        self.image_path = manifest.get("image")
        self.pixel_size_m = float(manifest.get("pixel_size_m", 0.3))
        self.queue = sorted(
            (c for c in self.store.candidates.values() if c.suggested), key=lambda c: c.id
        )
        self.lock = threading.Lock()
        self._image: np.ndarray | None = None
        self.thumb_dir = session_dir / "thumbs"

    def image(self) -> np.ndarray:
        if self._image is None:
            if not self.image_path or not Path(self.image_path).exists():
                raise FileNotFoundError(self.image_path)
            self._image = np.asarray(Image.open(self.image_path).convert("RGB"))
        return self._image

    def progress(self) -> dict:
        effective = self.store.effective()
        decided = [c for c in self.queue if c.id in effective]
        labeled_masks = self.store.labeled_mask_ids()
        per_class: dict[str, int] = {}
        for class_id in sorted(set(labeled_masks.values())):
            name = self.store.schema.class_name(class_id)
            per_class[name] = sum(1 for v in labeled_masks.values() if v == class_id)
        per_stage: dict[str, dict[str, int]] = {}
        for stage in ("small", "large"):
            stage_all = [c for c in self.queue if c.stage == stage]
            per_stage[stage] = {
                "total": len(stage_all),
                "decided": sum(1 for c in stage_all if c.id in effective),
            }
        return {
            "decided": len(decided),
            "remaining": len(self.queue) - len(decided),
            "masks_labeled": len(labeled_masks),
            "per_stage": per_stage,
            "per_class": per_class,
        }

    def cluster_view(self, cand) -> dict:
        effective = self.store.effective().get(cand.id)
        members = []
        for mid in cand.member_ids:
            rec = self.store.masks[mid]
            members.append(
                {
                    "id": rec.id,
                    "tile": list(rec.tile),
                    "bbox": list(rec.mask.bbox),
                    "area": rec.area_px,
                    "thumbnail": f"/api/thumbnail/{rec.id}",
                }
            )
        decided = None
        if effective is not None:
            decided = {
                "verdict": effective.verdict,
                "class_id": effective.class_id,
                "excluded_member_ids": list(effective.excluded_member_ids),
            }
        return {
            "cluster_id": cand.id,
            "stage": cand.stage,
            "suggested_class": {
                "id": cand.dominant_class,
                "name": self.store.schema.class_name(cand.dominant_class),
            },
            "purity": cand.purity,
            "members": members,
            "decided": decided,
        }


def render_thumbnail(image: np.ndarray, mask, pad_ratio: float = 0.25) -> bytes:
    """RGB crop of the mask bbox padded 25% per side (clamped to the image),
    with a 2-px contour burned in. Deterministic, hence cacheable."""
    h_img, w_img = image.shape[:2]
    x0, y0, w, h = mask.bbox
    pad_x, pad_y = round(w * pad_ratio), round(h * pad_ratio)
    cx0, cy0 = max(0, x0 - pad_x), max(0, y0 - pad_y)
    cx1, cy1 = min(w_img, x0 + w + pad_x), min(h_img, y0 + h + pad_y)
    crop = image[cy0:cy1, cx0:cx1].copy()

    bits = np.zeros((cy1 - cy0, cx1 - cx0), bool)
    bits[y0 - cy0 : y0 - cy0 + h, x0 - cx0 : x0 - cx0 + w] = mask.decode()
    grown = ndimage.binary_dilation(bits)
    shrunk = ndimage.binary_erosion(bits)
    crop[grown & ~shrunk] = _CONTOUR_COLOR

    buf = io.BytesIO()
    Image.fromarray(crop, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": status, "message": message})


def create_app(session_dir: Path | str, ui_dir: Path | str | None = None) -> FastAPI:
    """Build the app. A missing/broken session yields 409 on every API call,
    mirroring the 'no session open' contract."""
    app = FastAPI(title="mcae-annotate")
    state: SessionState | None = None
    try:
        state = SessionState(Path(session_dir))
    except (DataError, FileNotFoundError):
        state = None
    app.state.session = state

    def session() -> SessionState:
        if app.state.session is None:
            raise _NoSession()
        return app.state.session

    class _NoSession(Exception):
        pass

    @app.exception_handler(_NoSession)
    async def _no_session_handler(request: Request, exc: _NoSession):
        return _error(409, "no session open")

    @app.get("/api/schema")
    def get_schema():
        st = session()
        return {
            "name": st.store.schema.name,
            "classes": [
                {"id": cid, "name": name, "color": list(color)}
                for cid, name, color in st.store.schema.classes
            ],
            "ignore_id": st.store.schema.ignore_id,
        }

    @app.get("/api/clusters/next")
    def next_cluster(after: int = -1):
        st = session()
        effective = st.store.effective()
        for cand in st.queue:
            if cand.id > after and cand.id not in effective:
                return st.cluster_view(cand)
        return {"done": True, "remaining": 0}

    @app.get("/api/clusters/{cluster_id}")
    def get_cluster(cluster_id: int):
        st = session()
        cand = st.store.candidates.get(cluster_id)
        if cand is None:
            return _error(404, f"no cluster {cluster_id}")
        return st.cluster_view(cand)

    @app.post("/api/clusters/{cluster_id}/decision")
    def post_decision(cluster_id: int, payload: dict):
        st = session()
        verdict = payload.get("verdict")
        if verdict not in (VERDICT_LABELED, VERDICT_REJECTED):
            return _error(422, f"verdict must be labeled|rejected, got {verdict!r}")
        class_id = payload.get("class")
        if verdict == VERDICT_LABELED and class_id is None:
            return _error(422, "labeled verdict needs a class")
        decision = ClusterDecision(
            cluster_id=cluster_id,
            verdict=verdict,
            class_id=class_id,
            excluded_member_ids=tuple(payload.get("excluded", ())),
            annotator=str(payload.get("annotator", "")),
            timestamp=int(payload.get("timestamp", 0)),
        )
        with st.lock:
            try:
                st.store.record_decision(decision)
            except UnknownClusterError as exc:
                return _error(404, str(exc))
            except (NonMemberExclusionError, InvalidClassError) as exc:
                return _error(422, str(exc))
            return st.progress()

    @app.get("/api/progress")
    def progress():
        return session().progress()

    @app.get("/api/thumbnail/{mask_id}")
    def thumbnail(mask_id: int):
        st = session()
        rec = st.store.masks.get(mask_id)
        if rec is None:
            return _error(404, f"no mask {mask_id}")
        hits = list(st.thumb_dir.glob(f"{mask_id}-*.png")) if st.thumb_dir.is_dir() else []
        if hits:
            return Response(content=hits[0].read_bytes(), media_type="image/png")
        try:
            image = st.image()
        except FileNotFoundError:
            return _error(503, "source imagery unavailable")
        png = render_thumbnail(image, global_frame(rec, st.grid))
        digest = hashlib.sha256(png).hexdigest()[:16]
        st.thumb_dir.mkdir(exist_ok=True)
        (st.thumb_dir / f"{mask_id}-{digest}.png").write_bytes(png)
        return Response(content=png, media_type="image/png")

    @app.get("/api/export/sparse.png")
    def export_sparse():
        st = session()
        with st.lock:
            raster = st.store.export_sparse(st.grid, st.pixel_size_m)
        buf = io.BytesIO()
        Image.fromarray(raster.data, mode="L").save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app


def serve(session_dir: Path | str, addr: str = "127.0.0.1:8731", ui_dir=None) -> None:
    import uvicorn

    host, _, port = addr.partition(":")
    app = create_app(session_dir, ui_dir)
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port or 8731), log_level="warning")
