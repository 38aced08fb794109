"""
Plaid command-line application: run configuration, checkpoint container and
one handler module per subcommand (see app.commands).
"""
