"""Bundled pglib-opf case files (CC BY 4.0, see PGLIB_LICENSE)."""
