"""FastAPI admin app for one shard: health, pool listing, pool info and digests."""

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from active_store.errors import NotFound, ParameterError

SERVICE_NAME = "active-store shard"


def create_app(shard) -> FastAPI:
    app = FastAPI(
        title="Active Store Admin",
        description="Pool inspection for one shard",
        version="1.0.0",
    )

    @app.get("/")
    async def root():
        return {"status": "ok", "service": SERVICE_NAME, "shard_id": shard.shard_id}

    @app.get("/health")
    async def health():
        return {"status": "healthy"}

    @app.get("/api/pools")
    async def list_pools():
        pools = []
        for name in shard.list_pools():
            pools.append({"name": name, "open": shard.open_pool(name) is not None})
        return {"shard_id": shard.shard_id, "pools": pools}

    @app.get("/api/pools/{name}")
    async def pool_info(name: str):
        """Size, free and used bytes, pair count and plugins of an open pool."""
        try:
            return shard.pool_info(name)
        except NotFound as e:
            return JSONResponse(status_code=404, content={"error": str(e)})

    @app.get("/api/pools/{name}/digest")
    async def pool_digest(name: str):
        pool = shard.open_pool(name)
        if pool is None:
            return JSONResponse(status_code=404, content={"error": f"pool {name} is not open"})
        try:
            return {"name": name, "digest": shard.pool_digest(pool.handle)}
        except (NotFound, ParameterError) as e:
            return JSONResponse(status_code=404, content={"error": str(e)})

    return app
