"""Service layer modules."""

