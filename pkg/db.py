"""
Run ledger: an SQLite database inside each experiment output directory that
records the state of every grid cell and the per-epoch metrics of completed
cells. Resuming an experiment reads finished cells back from here.
"""

import logging
from pathlib import Path

from sqlalchemy import Column, Float, Integer, String, Text, UniqueConstraint, create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

logger = logging.getLogger(__name__)

LEDGER_NAME = "ledger.sqlite"

# Create a base class for declarative models
Base = declarative_base()


class GridCellRow(Base):
    __tablename__ = "grid_cells"

    key = Column(String(200), primary_key=True)
    dataset = Column(String(50), nullable=False)
    strategy = Column(String(30), nullable=False)
    prior_task = Column(String(10), nullable=True)
    target_task = Column(String(10), nullable=False)
    run_id = Column(Integer, nullable=False)
    status = Column(String(20), nullable=False, default="pending")
    checkpoint = Column(String(500), nullable=True)
    halt_epoch = Column(Integer, nullable=True)
    best_epoch = Column(Integer, nullable=True)
    error = Column(Text, nullable=True)

    def __repr__(self):
        return f"<GridCellRow(key='{self.key}', status='{self.status}')>"

    def to_dict(self):
        return {
            "key": self.key,
            "dataset": self.dataset,
            "strategy": self.strategy,
            "prior_task": self.prior_task,
            "target_task": self.target_task,
            "run_id": self.run_id,
            "status": self.status,
            "checkpoint": self.checkpoint,
            "halt_epoch": self.halt_epoch,
            "best_epoch": self.best_epoch,
            "error": self.error,
        }


class MetricRow(Base):
    __tablename__ = "metrics"
    __table_args__ = (UniqueConstraint("cell_key", "epoch", "metric"),)

    id = Column(Integer, primary_key=True, autoincrement=True)
    cell_key = Column(String(200), nullable=False, index=True)
    dataset = Column(String(50), nullable=False)
    strategy = Column(String(30), nullable=False)
    prior_task = Column(String(10), nullable=True)
    target_task = Column(String(10), nullable=False)
    run_id = Column(Integer, nullable=False)
    epoch = Column(Integer, nullable=False)
    metric = Column(String(30), nullable=False)
    value = Column(Float, nullable=False)

    def __repr__(self):
        return f"<MetricRow(cell='{self.cell_key}', epoch={self.epoch}, metric='{self.metric}')>"

    def to_dict(self):
        return {
            "dataset": self.dataset,
            "strategy": self.strategy,
            "prior_task": self.prior_task,
            "target_task": self.target_task,
            "run_id": self.run_id,
            "epoch": self.epoch,
            "metric": self.metric,
            "value": self.value,
        }


class Ledger:
    """
    Session factory bound to one output directory's ledger file.

    Args:
        out_dir (str or Path): Experiment output directory
    """

    def __init__(self, out_dir):
        self.path = Path(out_dir) / LEDGER_NAME
        self.engine = create_engine(f"sqlite:///{self.path}")
        Base.metadata.create_all(self.engine)
        self.SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=self.engine)

    def close(self):
        self.engine.dispose()

    def save_cell(self, cell_data):
        """Insert or replace a grid cell row"""
        db = self.SessionLocal()
        try:
            db.merge(GridCellRow(**cell_data))
            db.commit()
            return True
        except Exception as e:
            db.rollback()
            logger.error("Error saving grid cell %s: %s", cell_data.get("key"), e)
            return False
        finally:
            db.close()

    def mark_cell(self, key, **fields):
        """Update fields of an existing grid cell"""
        db = self.SessionLocal()
        try:
            row = db.get(GridCellRow, key)
            if row is None:
                return False
            for name, value in fields.items():
                setattr(row, name, value)
            db.commit()
            return True
        except Exception as e:
            db.rollback()
            logger.error("Error updating grid cell %s: %s", key, e)
            return False
        finally:
            db.close()

    def get_cell(self, key):
        db = self.SessionLocal()
        try:
            row = db.get(GridCellRow, key)
            return row.to_dict() if row is not None else None
        finally:
            db.close()

    def get_cells(self, status=None):
        """All grid cells, optionally filtered by status, ordered by key"""
        db = self.SessionLocal()
        try:
            query = db.query(GridCellRow)
            if status is not None:
                query = query.filter(GridCellRow.status == status)
            return [row.to_dict() for row in query.order_by(GridCellRow.key).all()]
        finally:
            db.close()

    def save_metrics(self, cell_key, records):
        """
        Replace the metrics of one cell in a single transaction

        Args:
            cell_key (str): Grid cell key
            records (list): Dicts with the ``MetricRow.to_dict`` fields

        Returns:
            bool: Whether the records were stored
        """
        db = self.SessionLocal()
        try:
            db.query(MetricRow).filter(MetricRow.cell_key == cell_key).delete()
            db.add_all(MetricRow(cell_key=cell_key, **record) for record in records)
            db.commit()
            return True
        except Exception as e:
            db.rollback()
            logger.error("Error saving metrics of %s: %s", cell_key, e)
            return False
        finally:
            db.close()

    def get_all_metrics(self):
        """All metric records in a deterministic order"""
        db = self.SessionLocal()
        try:
            rows = db.query(MetricRow).order_by(
                MetricRow.dataset, MetricRow.strategy, MetricRow.prior_task, MetricRow.target_task,
                MetricRow.run_id, MetricRow.metric, MetricRow.epoch,
            ).all()
            return [row.to_dict() for row in rows]
        finally:
            db.close()

    def export_manifest(self, path):
        """Write ``key<TAB>status<TAB>checkpoint`` lines for every grid cell"""
        lines = ["# cell\tstatus\tcheckpoint"]
        for cell in self.get_cells():
            lines.append(f"{cell['key']}\t{cell['status']}\t{cell['checkpoint'] or '-'}")
        Path(path).write_text("\n".join(lines) + "\n")


def open_ledger(out_dir):
    """Open (creating if needed) the ledger of an output directory"""
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    return Ledger(out_dir)
