from datetime import datetime
import uuid

from sqlalchemy import Column, DateTime, ForeignKey, Integer, String, Text, create_engine
from sqlalchemy.orm import declarative_base, relationship, sessionmaker

Base = declarative_base()


class Run(Base):
    __tablename__ = 'runs'
    id = Column(String(36), primary_key=True, default=lambda: str(uuid.uuid4()))
    subcommand = Column(String(32), index=True)
    problem = Column(String(64))
    seed = Column(String(32))
    output_dir = Column(String(512))
    status = Column(String(20), default='running')  # running/ok/failed
    exit_code = Column(Integer, nullable=True)
    started = Column(DateTime, default=datetime.utcnow)
    finished = Column(DateTime, nullable=True)
    logs = relationship('Log', backref='run', lazy='dynamic')

    def __repr__(self):
        return f'<Run {self.subcommand} {self.problem} ({self.status})>'


class Log(Base):
    __tablename__ = 'logs'
    id = Column(Integer, primary_key=True)
    run_id = Column(String(36), ForeignKey('runs.id'))
    action = Column(String(128))
    details = Column(Text, nullable=True)
    timestamp = Column(DateTime, index=True, default=datetime.utcnow)

    def __repr__(self):
        return f'<Log {self.run_id} - {self.action}>'


def open_audit(uri):
    """Session on the audit database at `uri`, creating the tables if needed."""
    engine = create_engine(uri)
    Base.metadata.create_all(engine)
    return sessionmaker(bind=engine)()
