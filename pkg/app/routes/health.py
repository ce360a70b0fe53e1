from fastapi import APIRouter
from datetime import datetime, timezone
from app.config import get_settings
from app.models.schemas import HealthResponse
from app import __version__

router = APIRouter()

@router.get("/health", response_model=HealthResponse)
async def health_check():
    """Health check endpoint"""
    return HealthResponse(
        status="healthy",
        timestamp=datetime.now(timezone.utc).isoformat(),
        version=__version__,
        checkpoint=get_settings().checkpoint,
    )
