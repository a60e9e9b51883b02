# routes/evaluate_routes.py

import logging
from typing import List, Optional

from fastapi import APIRouter, HTTPException
from pydantic import BaseModel

from src.core.config import get_settings
from src.core.errors import BlinkSegmentationError
from src.metrics import evaluate

router = APIRouter()
logger = logging.getLogger(__name__)


class EvaluateRequest(BaseModel):
    predicted: List[int]
    true: List[int]
    iou_threshold: Optional[float] = None


@router.post("/evaluate")
async def evaluate_labels(body: EvaluateRequest):
    try:
        invalid = [v for v in body.predicted + body.true if v not in (0, 1)]
        if invalid:
            raise HTTPException(status_code=400, detail="Labels must be 0 or 1")
        threshold = body.iou_threshold if body.iou_threshold is not None else get_settings().IOU_THRESHOLD
        report = evaluate(body.predicted, body.true, threshold)
        logger.info(f"Evaluated {len(body.true)} samples: f1_micro {report.f1_micro:.4f}")
        return {"status": "success", **report.model_dump()}

    except HTTPException:
        raise
    except BlinkSegmentationError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.error(f"Error processing /evaluate request: {e}", exc_info=True)
        raise HTTPException(status_code=500, detail=f"Internal server error: {e}")
