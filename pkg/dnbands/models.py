from datetime import datetime
from sqlalchemy import (
    Column,
    Integer,
    String,
    Float,
    DateTime,
    Boolean,
    ForeignKey,
    Text,
)
from sqlalchemy.orm import relationship

from .database import Base


class Run(Base):
    """One CLI command execution."""

    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    command = Column(String, nullable=False)
    config_hash = Column(String(16), nullable=False)
    version = Column(String, nullable=False)
    switches = Column(Text)
    status = Column(String, nullable=False, default="running")
    exit_code = Column(Integer)
    started_at = Column(DateTime, default=datetime.utcnow)
    finished_at = Column(DateTime)
    out_dir = Column(Text)

    clusters = relationship("ClusterRow", back_populates="run", cascade="all, delete-orphan")
    moments = relationship("MomentRow", back_populates="run", cascade="all, delete-orphan")
    invariants = relationship("InvariantRow", back_populates="run", cascade="all, delete-orphan")


class ClusterRow(Base):
    """A cluster shift ``mu_{k,j}``."""

    __tablename__ = "cluster_rows"

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False, index=True)
    k = Column(Integer, nullable=False)
    j = Column(Integer, nullable=False)
    mu = Column(Float, nullable=False)

    run = relationship("Run", back_populates="clusters")


class MomentRow(Base):
    """A rescaled cluster moment ``T_k``."""

    __tablename__ = "moment_rows"

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False, index=True)
    phi = Column(String, nullable=False)
    k = Column(Integer, nullable=False)
    value = Column(Float, nullable=False)

    run = relationship("Run", back_populates="moments")


class InvariantRow(Base):
    """Predicted versus fitted band invariant."""

    __tablename__ = "invariant_rows"

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False, index=True)
    phi = Column(String, nullable=False)
    order = Column(Integer, nullable=False)
    predicted = Column(Float)
    fitted = Column(Float)
    abs_error = Column(Float)
    rel_error = Column(Float)
    condition = Column(Float)
    passed = Column(Boolean)

    run = relationship("Run", back_populates="invariants")
