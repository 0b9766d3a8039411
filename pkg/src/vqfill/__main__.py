from vqfill.cli import main

main()
