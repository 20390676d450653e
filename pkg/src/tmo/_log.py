import json
import logging

logger = logging.getLogger("tmo")


def warn(records, module, code, message, **fields):
    """Append a structured warning to ``records`` and emit it on the logger."""
    rec = {"module": module, "code": code, "message": message}
    rec.update(fields)
    if records is not None:
        records.append(rec)
    logger.warning(json.dumps(rec, sort_keys=True, default=str))
    return rec
