"""Jinja2 templates for run reports."""
