"""
Resource probes attached to training and pipeline log records
"""
import os
import shutil
import logging

import psutil
from django.conf import settings

logger = logging.getLogger(__name__)


def memory_status(percent):
    """Map a memory usage percentage onto the healthy/warning/critical bands"""
    if percent < settings.MEMORY_WARNING_PERCENT:
        return 'healthy'
    if percent < settings.MEMORY_CRITICAL_PERCENT:
        return 'warning'
    return 'critical'


def resource_snapshot():
    """
    Current process and host resource usage.

    Returned as a flat dict so it can be embedded into line-delimited
    training records.
    """
    snapshot = {}
    try:
        process = psutil.Process(os.getpid())
        snapshot['rss_mb'] = round(process.memory_info().rss / (1024 * 1024), 1)
        memory = psutil.virtual_memory()
        snapshot['memory_percent'] = memory.percent
        snapshot['memory_status'] = memory_status(memory.percent)
        if snapshot['memory_status'] != 'healthy':
            logger.warning(f"High memory usage: {memory.percent}%")
    except psutil.Error as e:
        logger.error(f"Memory probe failed: {e}")
        snapshot['memory_status'] = 'error'
    return snapshot


def disk_snapshot(path):
    """Free space on the volume holding `path`, used before writing run artifacts"""
    usage = shutil.disk_usage(path)
    used_percent = (usage.used / usage.total) * 100
    return {
        'free_gb': round(usage.free / (1024 ** 3), 2),
        'used_percent': round(used_percent, 1),
    }
