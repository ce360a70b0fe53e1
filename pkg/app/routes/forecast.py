from fastapi import APIRouter, File, HTTPException, UploadFile
import logging
import tempfile
from pathlib import Path

import pandas as pd

from app.config import get_settings
from app.errors import CMambaError, ConfigError, DataError
from app.models.schemas import FlopRequest, FlopResponse, PredictionResponse, PredictionRow
from app.services.experiment import flops_for_config, predict_csv

logger = logging.getLogger(__name__)
router = APIRouter()


@router.post("/flops", response_model=FlopResponse)
async def flops(request: FlopRequest):
    """FLOP estimate of one forward pass for the posted config"""
    try:
        logger.info(f"Estimating FLOPs for V={request.channels}, batch={request.batch_size or request.config.batch_size}")
        report = flops_for_config(request.config, request.channels, request.batch_size)
        return FlopResponse(report=report, increment_percent=100.0 * report.increment)
    except (ConfigError, DataError, ValueError) as e:
        logger.error(f"Invalid FLOP request: {str(e)}")
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.error(f"Error estimating FLOPs: {str(e)}")
        raise HTTPException(status_code=500, detail=f"Failed to estimate FLOPs: {str(e)}")


@router.post("/predict", response_model=PredictionResponse)
def predict(file: UploadFile = File(...), has_timestamp: bool = True):
    """Rolling forecasts for an uploaded CSV using the configured checkpoint"""
    checkpoint = get_settings().checkpoint
    if not checkpoint:
        raise HTTPException(status_code=503, detail="No checkpoint configured (set CMAMBA_CHECKPOINT)")

    with tempfile.TemporaryDirectory() as tmp:
        upload = Path(tmp) / "upload.csv"
        upload.write_bytes(file.file.read())
        try:
            logger.info(f"Forecasting {file.filename} with {checkpoint}")
            frame = predict_csv(checkpoint, upload, has_timestamp=has_timestamp)
        except (ConfigError, DataError) as e:
            logger.error(f"Rejected prediction input {file.filename}: {str(e)}")
            raise HTTPException(status_code=400, detail=str(e))
        except (CMambaError, OSError) as e:
            logger.error(f"Error forecasting {file.filename}: {str(e)}")
            raise HTTPException(status_code=500, detail=f"Failed to forecast: {str(e)}")

    rows = [
        PredictionRow(
            sample_index=int(r.sample_index),
            channel=str(r.channel),
            step=int(r.step),
            y_true=None if pd.isna(r.y_true) else float(r.y_true),
            y_pred=float(r.y_pred),
        )
        for r in frame.itertuples(index=False)
    ]
    return PredictionResponse(
        rows=rows,
        total_windows=int(frame["sample_index"].nunique()),
        horizon=int(frame["step"].max()) + 1,
    )
