#!/usr/bin/env python
import dotenv

from b2b_guidance.cli import app
from b2b_guidance.logging_config import setup_logging

logger = setup_logging()


def setup_environment() -> bool:
    if dotenv.load_dotenv():
        logger.info("Environment configuration loaded", source=".env file")
    else:
        logger.info("Environment configuration loaded", source="environment variables", note="No .env file found")
    return True


def run():
    """Main entry point for the b2b command line"""
    setup_environment()
    app()


if __name__ == "__main__":
    run()
