"""Check every analytic gradient against central differences, then show the
checker catching a deliberately corrupted gradient.

Run: python3 demos/gradcheck_demo.py
"""

from metric_forge import gradcheck as gc

registry = gc.default_registry()
reports = gc.check_all(registry, range(3))
print(gc.format_table(reports))
print(f"{sum(r.passed for r in reports)}/{len(reports)} passed\n")

bad = gc.corrupt(registry["proxy_anchor"], block="proxies", index=(1, 2))
(report,) = gc.check_all({"proxy_anchor (corrupted)": bad}, [0])
print(gc.format_table([report]))
print("worst coordinate:", report.worst_coordinate)
