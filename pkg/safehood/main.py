# safehood/main.py
import logging

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from safehood.config import settings

# Routers
from safehood.routers.simulate import router as simulate_router
from safehood.routers.verify import router as verify_router


def create_app() -> FastAPI:
    logging.basicConfig(level=settings.log_level.upper())
    app = FastAPI(title="safehood", version="0.1.0")

    # ---- CORS ----
    # Local notebooks and plotting front-ends only; no credentials are exchanged.
    cors_allow_origins = [
        "http://localhost:8888",
        "http://127.0.0.1:8888",
        "http://localhost:5173",
    ]

    app.add_middleware(
        CORSMiddleware,
        allow_origins=cors_allow_origins,
        allow_credentials=False,
        allow_methods=["GET", "POST"],
        allow_headers=["*"],
        max_age=86400,
    )

    # ---- Routes ----
    @app.get("/")
    def health():
        return {"status": "ok", "name": settings.app_name, "env": settings.app_env}

    app.include_router(simulate_router, prefix="/simulate", tags=["simulate"])
    app.include_router(verify_router, prefix="/verify", tags=["verify"])

    return app


app = create_app()
