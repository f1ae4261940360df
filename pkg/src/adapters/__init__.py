# src/adapters/__init__.py
