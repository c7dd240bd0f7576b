# safehood/routers/__init__.py
# Kept empty; routers are imported directly from their modules in safehood.main.
