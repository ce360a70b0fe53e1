from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
import logging
import sys
from dotenv import load_dotenv

from app import __version__
from app.routes.health import router as health_router
from app.routes.forecast import router as forecast_router

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

# Initialize FastAPI app
app = FastAPI(
    title="CMamba API",
    description="Multivariate time-series forecasting with CMamba: FLOP estimates and rolling forecasts",
    version=__version__,
    docs_url="/docs",
    redoc_url="/redoc"
)

# Configure CORS
app.add_middleware(
    CORSMiddleware,
    allow_origins=[
        "http://localhost:3000",
        "http://localhost:5173",
    ],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Global exception handler
@app.exception_handler(Exception)
async def global_exception_handler(request, exc):
    logger.error(f"Unhandled error on {request.url.path}: {str(exc)}")
    return JSONResponse(
        status_code=500,
        content={"detail": "An internal server error occurred"}
    )

# Root endpoint
@app.get("/")
async def root():
    return {
        "message": "CMamba forecasting API",
        "version": __version__,
        "status": "active"
    }

# Include routers
app.include_router(health_router, tags=["health"])
app.include_router(forecast_router, prefix="/api", tags=["forecast"])

if __name__ == "__main__":
    from app.cli import main

    sys.exit(main())
