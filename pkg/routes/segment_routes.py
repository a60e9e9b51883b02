# routes/segment_routes.py

import logging
from typing import Dict, List, Optional

import numpy as np
from fastapi import APIRouter, HTTPException, Request
from pydantic import BaseModel

from src.architectures import SequenceModel
from src.core.config import get_settings
from src.core.errors import BlinkSegmentationError
from src.recordings import ChannelConfig, Cohort, make_recording
from src.segmenter import WindowPlan, blink_statistics, build_plan, events_from_labels, segment

router = APIRouter()
logger = logging.getLogger(__name__)


class SegmentRequest(BaseModel):
    sample_rate_hz: float
    channels: Dict[str, List[float]]
    subject_id: str = "request"
    num_channels: Optional[int] = None
    window_len: Optional[int] = None
    stride: Optional[int] = None
    offsets: Optional[List[int]] = None


def _plan_for(body: SegmentRequest) -> WindowPlan:
    plan = WindowPlan.from_settings(get_settings())
    overrides = {
        key: value
        for key, value in {"window_len": body.window_len, "stride": body.stride, "offsets": body.offsets}.items()
        if value is not None
    }
    if not overrides:
        return plan
    fields = plan.model_dump()
    fields.update(overrides)
    if "offsets" in overrides and len(overrides["offsets"]) != len(plan.offsets):
        fields["offset_weights"] = None
    return build_plan(**fields)


@router.post("/segment")
async def segment_recording(body: SegmentRequest, request: Request):
    model: SequenceModel | None = request.app.state.model  # type: ignore

    if not model:
        logger.error("Segmentation model is not available (app.state.model is None)")
        raise HTTPException(status_code=503, detail="No segmentation model is loaded")

    try:
        logger.info(f"Processing /segment request for {body.subject_id}")
        lengths = {len(values) for values in body.channels.values()}
        if len(lengths) != 1:
            raise HTTPException(status_code=400, detail="All channels must have the same number of samples")
        names = list(body.channels)
        values = np.array([body.channels[name] for name in names], dtype=np.float64)
        recording = make_recording(
            subject_id=body.subject_id,
            cohort=Cohort.HC,
            sample_rate=body.sample_rate_hz,
            channel_names=names,
            values_uv=values,
            labels=np.zeros(values.shape[1], dtype=np.int8),
        )
        config = ChannelConfig.for_count(body.num_channels or model.spec.in_width)
        labels = segment(model, recording, config, _plan_for(body))
        events = events_from_labels(labels)
        stats = blink_statistics(labels, body.sample_rate_hz)

        return {
            "status": "success",
            "subject_id": body.subject_id,
            "labels": labels.astype(int).tolist(),
            "events": [event.model_dump() for event in events],
            "statistics": stats.model_dump(),
        }

    except HTTPException:
        raise
    except BlinkSegmentationError as e:
        logger.warning(f"Rejected /segment request: {e}")
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.error(f"Error processing /segment request: {e}", exc_info=True)
        raise HTTPException(status_code=500, detail=f"Internal server error: {e}")
