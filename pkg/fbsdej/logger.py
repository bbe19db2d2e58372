import logging

from fbsdej.models import Log

logger = logging.getLogger(__name__)


def record_log(session, run, action, details=None):
    """
    Helper function to add an audit entry for a CLI run.
    """
    if session is None or run is None:
        return
    try:
        log_entry = Log(
            run_id=run.id,
            action=action,
            details=details
        )
        session.add(log_entry)
        session.commit()
    except Exception as e:
        # Audit failures are logged, never raised.
        logger.warning(f"Error recording log: {e}")
        try:
            session.rollback()
        except Exception:
            pass
