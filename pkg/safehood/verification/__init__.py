# safehood/verification/__init__.py
# Import order follows the dependency chain: geometry -> bisim -> simulate
# -> robust -> safe -> cover. Modules are imported directly where used.
