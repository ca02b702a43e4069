"""Anomaly detection benchmark toolkit."""
