"""
Access control for the benchmark history API.
─────────────────────────────────────────────
When BENCH_API_KEY is set, every route except the liveness probe and the
OpenAPI pages needs the key, either in X-API-Key or as a Bearer token.
An unset key leaves the API open, which is the local-dev default.
"""

from __future__ import annotations

import hmac
import logging
import os
from dataclasses import dataclass, field

from fastapi import HTTPException, Request
from starlette.datastructures import Headers

logger = logging.getLogger(__name__)

OPEN_ROUTES: tuple[str, ...] = ("/healthz", "/docs", "/openapi.json", "/redoc")


@dataclass(frozen=True)
class AccessPolicy:
    api_key: str = ""
    open_routes: tuple[str, ...] = field(default=OPEN_ROUTES)

    @classmethod
    def from_env(cls) -> "AccessPolicy":
        return cls(api_key=os.getenv("BENCH_API_KEY", "").strip())

    @property
    def enforced(self) -> bool:
        return bool(self.api_key)

    def is_open(self, path: str) -> bool:
        return path == "/" or path.startswith(self.open_routes)

    @staticmethod
    def presented_key(headers: Headers) -> str | None:
        direct = headers.get("X-API-Key")
        if direct:
            return direct.strip()
        scheme, _, token = (headers.get("Authorization") or "").partition(" ")
        if scheme.lower() == "bearer" and token.strip():
            return token.strip()
        return None

    def admits(self, path: str, headers: Headers) -> bool:
        if not self.enforced or self.is_open(path):
            return True
        presented = self.presented_key(headers)
        return presented is not None and hmac.compare_digest(presented, self.api_key)


def validate_request_auth(request: Request) -> None:
    policy = AccessPolicy.from_env()
    if not policy.admits(request.url.path, request.headers):
        logger.warning("Rejected unauthenticated request to %s", request.url.path)
        raise HTTPException(status_code=401, detail="Unauthorized")
