#!/usr/bin/env python3
"""
Run ledger for training and evaluation runs.
- SQLAlchemy ORM table `runs`
- RunLedger with record/list helpers and context-manager support
- get_ledger() singleton, like the other centralized accessors
Timestamps live only here; no artifact depends on the ledger.
"""

import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

from sqlalchemy import Column, DateTime, Integer, String, Text, create_engine
from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import declarative_base, sessionmaker

from core.core_constants import DATA_DIR, DB_PATH

logger = logging.getLogger(__name__)

Base = declarative_base()


class RunRow(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, autoincrement=True)
    kind = Column(String(32), nullable=False, index=True)
    seed = Column(String(24), nullable=False)  # u64 does not fit a signed SQLite integer
    mode = Column(String(32))
    config_json = Column(Text, nullable=False)
    result_json = Column(Text, nullable=False)
    artifact_digest = Column(String(64))
    created_at = Column(DateTime, nullable=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "kind": self.kind,
            "seed": int(self.seed),
            "mode": self.mode,
            "config": json.loads(self.config_json),
            "result": json.loads(self.result_json),
            "artifact_digest": self.artifact_digest,
            "created_at": self.created_at.isoformat(),
        }


# ============================================================================
# LEDGER
# ============================================================================
class RunLedger:
    """Append-only record of demo runs."""

    def __init__(self, url: Optional[str] = None):
        if url is None:
            DATA_DIR.mkdir(parents=True, exist_ok=True)
            url = f"sqlite:///{Path(DB_PATH).as_posix()}"
        self.url = url
        self.engine = create_engine(url, future=True)
        Base.metadata.create_all(self.engine)
        self._session = sessionmaker(bind=self.engine, future=True)
        logger.info(f"Run ledger ready: {url}")

    def record_run(self, kind: str, seed: int, config: Dict[str, Any], result: Dict[str, Any],
                   mode: Optional[str] = None, artifact_digest: Optional[str] = None) -> int:
        row = RunRow(
            kind=kind,
            seed=str(int(seed)),
            mode=mode,
            config_json=json.dumps(config, sort_keys=True),
            result_json=json.dumps(result, sort_keys=True),
            artifact_digest=artifact_digest,
            created_at=datetime.now(timezone.utc).replace(tzinfo=None),
        )
        with self._session() as session:
            try:
                session.add(row)
                session.commit()
                logger.info(f"Recorded {kind} run #{row.id}")
                return row.id
            except SQLAlchemyError as e:
                session.rollback()
                logger.error(f"Error recording run: {e}")
                raise

    def list_runs(self, kind: Optional[str] = None) -> List[Dict[str, Any]]:
        with self._session() as session:
            query = session.query(RunRow)
            if kind:
                query = query.filter(RunRow.kind == kind)
            return [row.to_dict() for row in query.order_by(RunRow.id).all()]

    def close(self) -> None:
        self.engine.dispose()
        logger.info("Run ledger closed")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()


# ============================================================================
# SHARED LEDGER - one open ledger per process, reopened when the URL changes
# ============================================================================
_ledger_instance: Optional[RunLedger] = None


def get_ledger(url: Optional[str] = None) -> RunLedger:
    """Process-wide ledger; a different url replaces the cached instance."""
    global _ledger_instance
    if _ledger_instance is None or (url is not None and _ledger_instance.url != url):
        if _ledger_instance is not None:
            _ledger_instance.close()
        _ledger_instance = RunLedger(url)
    return _ledger_instance
