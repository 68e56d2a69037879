"""Order-preserving parallel map.

Work items run on a thread pool but results always come back in input
order, so reductions stay bit-identical no matter how many workers run.
"""

from concurrent.futures import ThreadPoolExecutor


def parallel_map(fn, items, jobs):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))
