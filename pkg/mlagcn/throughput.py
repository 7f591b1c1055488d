from statistics import mean
from collections import defaultdict

import singer
import singer.utils

# Window (in seconds) over which raw counts are collected before a
# compressed datapoint is captured and the running rates are logged.
capture_rate = 60

throughput_data = {
    # When the current capture window started
    'window_start_time': None,
    # metric => [window_count_1, ..., window_count_n]
    'aggregate_rates': defaultdict(list),
    # metric => count since the last aggregation
    'window_counts': defaultdict(int)
}

LOGGER = singer.get_logger()


def _seconds_since_datetime(dt):
    return (singer.utils.now() - dt).total_seconds()


def _log_aggregate_rates(current_capture_rate, aggregate_rates):
    if not list(aggregate_rates.items()):
        LOGGER.info("No training throughput was captured")
        return
    for metric, value in aggregate_rates.items():
        LOGGER.info("Processed %s %ss per %s seconds on average (min %s, max %s); %s in total over %s seconds",
                    mean(value), metric, current_capture_rate, min(value), max(value), sum(value),
                    # windows may close early, so this is an idealized duration
                    current_capture_rate * len(value))


def _aggregate_rates(current_capture_rate, current_data):
    LOGGER.debug("Computing aggregate throughput over the previous %d seconds", current_capture_rate)
    window_counts = current_data['window_counts']
    aggregate_rates = current_data['aggregate_rates']
    for metric in list(window_counts.keys()):
        aggregate_rates[metric] += [window_counts.pop(metric)]
    current_data['window_start_time'] = singer.utils.now()
    _log_aggregate_rates(current_capture_rate, aggregate_rates)


def _maybe_aggregate_rates(current_capture_rate, current_data):
    if current_capture_rate <= _seconds_since_datetime(current_data['window_start_time']):
        _aggregate_rates(current_capture_rate, current_data)


def capture(metric, count=1):
    """Add ``count`` to ``metric`` in the open window; close the window when it is due."""
    if not throughput_data['window_start_time']:
        throughput_data['window_start_time'] = singer.utils.now()
        LOGGER.debug('Starting throughput capture at %s',
                     singer.utils.strftime(throughput_data['window_start_time']))
    throughput_data['window_counts'][metric] += count
    _maybe_aggregate_rates(capture_rate, throughput_data)


def log_aggregate_rates():
    """Close the open window and log the rates captured so far."""
    if throughput_data['window_start_time'] is None:
        _log_aggregate_rates(capture_rate, throughput_data['aggregate_rates'])
        return
    _aggregate_rates(capture_rate, throughput_data)


def reset():
    throughput_data['window_start_time'] = None
    throughput_data['aggregate_rates'].clear()
    throughput_data['window_counts'].clear()
