import logging  # For lifespan logging
import os
import sys
from contextlib import asynccontextmanager  # For lifespan

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

# --- Module imports ---
try:
    from src.checkpoint import load_checkpoint
    from src.core.config import get_settings
    from routes.segment_routes import router as segment_router
    from routes.evaluate_routes import router as evaluate_router
except ImportError as e:
    logger = logging.getLogger("main_app")
    logger.error(f"Error importing modules: {e}. Check your import paths and project structure.")
    logger.error(f"Current sys.path: {sys.path}")
    raise ImportError(f"Could not import required modules: {e}")

logging.basicConfig(
    level=getattr(logging, get_settings().LOG_LEVEL.upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
)
logger = logging.getLogger("main_app")  # Specific logger for this part

# Add the application root directory to the sys.path
app_root = os.path.abspath(os.path.dirname(__file__))
if app_root not in sys.path:
    sys.path.insert(0, app_root)


@asynccontextmanager
async def lifespan(app: FastAPI):
    logger.info("Starting application and resources (lifespan)...")
    app.state.model = None
    app.state.checkpoint_path = None

    checkpoint_path = get_settings().CHECKPOINT_PATH
    if checkpoint_path:
        logger.info(f"Loading checkpoint from: {checkpoint_path}")
        try:
            checkpoint = load_checkpoint(checkpoint_path)
            app.state.model = checkpoint.to_model()
            app.state.checkpoint_path = checkpoint_path
            logger.info(f"Model {checkpoint.hyperparams.model_kind.value} loaded.")
        except Exception as e:
            # The service keeps running without a model; /segment answers 503
            logger.error(f"Could not load checkpoint {checkpoint_path}: {e}", exc_info=True)
            app.state.model = None
    else:
        logger.warning("CHECKPOINT_PATH is not set, segmentation is disabled")

    yield  # Application runs here

    logger.info("Shutting down application and releasing resources (lifespan)...")
    app.state.model = None
    app.state.checkpoint_path = None
    logger.info("Lifespan resources cleaned up.")


app = FastAPI(
    title="Blink Segmentation Service",
    description="Segments EEG recordings into involuntary blinks and non-blinks",
    version="0.1.0",
    lifespan=lifespan,
)

# Configure CORS
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],  # In production, replace with specific origins
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(
    segment_router,
    prefix="/recordings",
    tags=["segment"]
)

app.include_router(
    evaluate_router,
    prefix="/recordings",
    tags=["evaluate"]
)


@app.get("/")
async def root():
    """
    Root endpoint to verify if the service is running.
    """
    model = getattr(app.state, "model", None)
    return {
        "status": "ok",
        "message": "Blink Segmentation Service is running",
        "model_status": "loaded" if model else "not loaded",
        "hyperparams": model.hyperparams.model_dump(mode="json") if model else None,
    }

# If you want to run this directly with uvicorn (for development)
# if __name__ == "__main__":
#     import uvicorn
#     uvicorn.run("main:app", host="0.0.0.0", port=8000, reload=True)
